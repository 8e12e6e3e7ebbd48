#include "lvm/codebook.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "lvm/rng.hpp"

namespace lvm {

namespace {

using MatrixXdRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_divisible(int height, int width, int patch) {
  if (patch < 1) throw std::invalid_argument("patch size must be >= 1");
  if (height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("image dims " + std::to_string(height) + "x" +
                                std::to_string(width) + " not divisible by patch " +
                                std::to_string(patch));
  }
}

// Squared distances of every patch to every code via |p|^2 - 2 p.c + |c|^2.
// Assignments and the reported MSE come from the same numbers, which keeps
// the per-iteration error exactly non-increasing.
struct Assignment {
  std::vector<int> cluster;
  std::vector<double> min_dist;
  double total = 0.0;
};

Assignment assign(const MatrixXdRM& patches, const MatrixXdRM& codes) {
  const Eigen::Index n = patches.rows();
  const Eigen::Index k = codes.rows();
  Assignment out;
  out.cluster.resize(static_cast<std::size_t>(n));
  out.min_dist.resize(static_cast<std::size_t>(n));
  const Eigen::VectorXd pnorm = patches.rowwise().squaredNorm();
  const Eigen::VectorXd cnorm = codes.rowwise().squaredNorm();

  constexpr Eigen::Index block = 4096;
  for (Eigen::Index start = 0; start < n; start += block) {
    const Eigen::Index rows = std::min(block, n - start);
    MatrixXdRM scores = patches.middleRows(start, rows) * codes.transpose();
    for (Eigen::Index r = 0; r < rows; ++r) {
      int best = 0;
      double best_d = pnorm[start + r] - 2.0 * scores(r, 0) + cnorm[0];
      for (Eigen::Index c = 1; c < k; ++c) {
        const double d = pnorm[start + r] - 2.0 * scores(r, c) + cnorm[c];
        if (d < best_d) {
          best_d = d;
          best = static_cast<int>(c);
        }
      }
      out.cluster[static_cast<std::size_t>(start + r)] = best;
      out.min_dist[static_cast<std::size_t>(start + r)] = best_d;
      out.total += best_d;
    }
  }
  return out;
}

// k-means++ seeding: first center uniform, then D^2-weighted draws.
MatrixXdRM seed_centers(const MatrixXdRM& patches, int k, Rng& rng) {
  const Eigen::Index n = patches.rows();
  MatrixXdRM centers(k, patches.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::max());
  Eigen::Index first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centers.row(0) = patches.row(first);
  for (int c = 1; c < k; ++c) {
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (patches.row(i) - centers.row(c - 1)).squaredNorm();
      auto& slot = d2[static_cast<std::size_t>(i)];
      if (d < slot) slot = d;
      sum += slot;
    }
    Eigen::Index pick = 0;
    if (sum > 0.0) {
      double target = rng.uniform() * sum;
      double acc = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.row(c) = patches.row(pick);
  }
  return centers;
}

}  // namespace

namespace detail {

std::vector<float> extract_patches(const Image& image, int patch) {
  check_divisible(image.height, image.width, patch);
  const int rows = image.height / patch;
  const int cols = image.width / patch;
  const int dim = patch * patch * 3;
  std::vector<float> out(static_cast<std::size_t>(rows) * cols * dim);
  std::size_t off = 0;
  for (int pr = 0; pr < rows; ++pr) {
    for (int pc = 0; pc < cols; ++pc) {
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          for (int c = 0; c < 3; ++c) {
            out[off++] = image.at(pr * patch + y, pc * patch + x, c);
          }
        }
      }
    }
  }
  return out;
}

int nearest_code(const float* patch_vec, const Codebook& cb) {
  int best = 0;
  double best_d = std::numeric_limits<double>::max();
  for (int c = 0; c < cb.k; ++c) {
    const float* code = cb.code(c);
    double pn = 0.0, dot = 0.0, cn = 0.0;
    for (int i = 0; i < cb.dim; ++i) {
      const double p = static_cast<double>(patch_vec[i]);
      const double q = static_cast<double>(code[i]);
      pn += p * p;
      dot += p * q;
      cn += q * q;
    }
    const double d = pn - 2.0 * dot + cn;
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace detail

Codebook fit_codebook(const std::vector<Image>& images, int k, int patch, int iters,
                      std::uint64_t seed, FitTrace* trace) {
  if (k < 1) throw std::invalid_argument("fit_codebook: k must be >= 1");
  if (iters < 1) throw std::invalid_argument("fit_codebook: iters must be >= 1");
  const int dim = patch * patch * 3;

  std::int64_t total_patches = 0;
  for (const auto& img : images) {
    check_divisible(img.height, img.width, patch);
    total_patches += static_cast<std::int64_t>(img.height / patch) * (img.width / patch);
  }
  if (total_patches < k) {
    throw std::invalid_argument("fit_codebook: " + std::to_string(total_patches) +
                                " patches available but k=" + std::to_string(k));
  }

  MatrixXdRM patches(total_patches, dim);
  Eigen::Index row = 0;
  for (const auto& img : images) {
    const std::vector<float> p = detail::extract_patches(img, patch);
    const Eigen::Index n = static_cast<Eigen::Index>(p.size()) / dim;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int j = 0; j < dim; ++j) patches(row, j) = static_cast<double>(p[static_cast<std::size_t>(i * dim + j)]);
      ++row;
    }
  }

  Rng rng(seed);
  MatrixXdRM centers = seed_centers(patches, k, rng);
  // Work on float-rounded codes throughout: the stored codebook and the codes
  // the error is measured against are the same values.
  centers = centers.cast<float>().cast<double>();

  if (trace) trace->iteration_mse.clear();
  std::vector<double> sums(static_cast<std::size_t>(k) * dim);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k));

  for (int it = 0; it < iters; ++it) {
    Assignment a = assign(patches, centers);

    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (Eigen::Index i = 0; i < patches.rows(); ++i) {
      const int c = a.cluster[static_cast<std::size_t>(i)];
      counts[static_cast<std::size_t>(c)]++;
      for (int j = 0; j < dim; ++j) sums[static_cast<std::size_t>(c) * dim + j] += patches(i, j);
    }

    // Empty clusters steal the globally farthest patch.
    std::vector<char> stolen(static_cast<std::size_t>(patches.rows()), 0);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        for (int j = 0; j < dim; ++j) {
          centers(c, j) = sums[static_cast<std::size_t>(c) * dim + j] /
                          static_cast<double>(counts[static_cast<std::size_t>(c)]);
        }
      } else {
        Eigen::Index far = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < patches.rows(); ++i) {
          if (stolen[static_cast<std::size_t>(i)]) continue;
          if (a.min_dist[static_cast<std::size_t>(i)] > far_d) {
            far_d = a.min_dist[static_cast<std::size_t>(i)];
            far = i;
          }
        }
        stolen[static_cast<std::size_t>(far)] = 1;
        centers.row(c) = patches.row(far);
      }
    }
    centers = centers.cast<float>().cast<double>();

    if (trace) {
      trace->iteration_mse.push_back(a.total / static_cast<double>(patches.rows()));
    }
  }

  Codebook cb;
  cb.k = k;
  cb.dim = dim;
  cb.patch = patch;
  cb.vectors.resize(static_cast<std::size_t>(k) * dim);
  for (int c = 0; c < k; ++c) {
    for (int j = 0; j < dim; ++j) {
      cb.vectors[static_cast<std::size_t>(c) * dim + j] = static_cast<float>(centers(c, j));
    }
  }
  return cb;
}

TokenGrid encode(const Image& image, const Codebook& cb) {
  check_divisible(image.height, image.width, cb.patch);
  TokenGrid grid;
  grid.rows = image.height / cb.patch;
  grid.cols = image.width / cb.patch;
  grid.ids.resize(static_cast<std::size_t>(grid.rows) * grid.cols);
  const std::vector<float> raw = detail::extract_patches(image, cb.patch);
  const int n = grid.count();

  // one DGEMM per image; same |p|^2 - 2 p.c + |c|^2 metric as fitting
  MatrixXdRM patches(n, cb.dim);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < cb.dim; ++j) {
      patches(i, j) = static_cast<double>(raw[static_cast<std::size_t>(i) * cb.dim + j]);
    }
  }
  MatrixXdRM codes(cb.k, cb.dim);
  for (int c = 0; c < cb.k; ++c) {
    for (int j = 0; j < cb.dim; ++j) codes(c, j) = static_cast<double>(cb.code(c)[j]);
  }
  const MatrixXdRM scores = patches * codes.transpose();
  const Eigen::VectorXd pnorm = patches.rowwise().squaredNorm();
  const Eigen::VectorXd cnorm = codes.rowwise().squaredNorm();
  for (int i = 0; i < n; ++i) {
    int best = 0;
    double best_d = pnorm[i] - 2.0 * scores(i, 0) + cnorm[0];
    for (int c = 1; c < cb.k; ++c) {
      const double d = pnorm[i] - 2.0 * scores(i, c) + cnorm[c];
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    grid.ids[static_cast<std::size_t>(i)] = best;
  }
  return grid;
}

Image decode(const TokenGrid& tokens, const Codebook& cb) {
  Image img(tokens.rows * cb.patch, tokens.cols * cb.patch);
  for (int pr = 0; pr < tokens.rows; ++pr) {
    for (int pc = 0; pc < tokens.cols; ++pc) {
      const std::int32_t id = tokens.ids[static_cast<std::size_t>(pr) * tokens.cols + pc];
      if (id < 0 || id >= cb.k) {
        throw std::out_of_range("decode: token id " + std::to_string(id) +
                                " outside codebook of size " + std::to_string(cb.k));
      }
      const float* code = cb.code(id);
      int off = 0;
      for (int y = 0; y < cb.patch; ++y) {
        for (int x = 0; x < cb.patch; ++x) {
          for (int c = 0; c < 3; ++c) {
            img.at(pr * cb.patch + y, pc * cb.patch + x, c) =
                std::clamp(code[off++], 0.0f, 1.0f);
          }
        }
      }
    }
  }
  return img;
}

int tokens_per_image(const Codebook& cb, int height, int width) {
  check_divisible(height, width, cb.patch);
  return (height / cb.patch) * (width / cb.patch);
}

namespace {

constexpr char kCodebookMagic[8] = {'D', 'E', 'V', 'Q', '0', '0', '0', '1'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error(std::string("truncated codebook block reading ") + what);
  return v;
}

}  // namespace

void write_codebook_stream(std::ostream& out, const Codebook& cb) {
  out.write(kCodebookMagic, sizeof(kCodebookMagic));
  write_raw(out, static_cast<std::uint32_t>(cb.k));
  write_raw(out, static_cast<std::uint32_t>(cb.dim));
  write_raw(out, static_cast<std::uint32_t>(cb.patch));
  out.write(reinterpret_cast<const char*>(cb.vectors.data()),
            static_cast<std::streamsize>(cb.vectors.size() * sizeof(float)));
}

Codebook read_codebook_stream(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCodebookMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad codebook magic (expected DEVQ0001)");
  }
  Codebook cb;
  cb.k = static_cast<int>(read_raw<std::uint32_t>(in, "k"));
  cb.dim = static_cast<int>(read_raw<std::uint32_t>(in, "dim"));
  cb.patch = static_cast<int>(read_raw<std::uint32_t>(in, "patch"));
  if (cb.k < 1 || cb.dim != cb.patch * cb.patch * 3) {
    throw std::runtime_error("codebook header is inconsistent");
  }
  cb.vectors.resize(static_cast<std::size_t>(cb.k) * cb.dim);
  in.read(reinterpret_cast<char*>(cb.vectors.data()),
          static_cast<std::streamsize>(cb.vectors.size() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated codebook vectors");
  return cb;
}

void write_codebook(const std::string& path, const Codebook& cb) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_codebook_stream(out, cb);
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

Codebook read_codebook(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return read_codebook_stream(in);
}

}  // namespace lvm
