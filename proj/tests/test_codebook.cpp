#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <vector>

#include "lvm/codebook.hpp"
#include "lvm/rng.hpp"

using namespace lvm;

namespace {

Image image_from_patches(const std::vector<std::vector<float>>& patch_vecs, int patch, int cols) {
  const int rows = static_cast<int>(patch_vecs.size()) / cols;
  Image img(rows * patch, cols * patch);
  for (int pr = 0; pr < rows; ++pr) {
    for (int pc = 0; pc < cols; ++pc) {
      const auto& vec = patch_vecs[static_cast<std::size_t>(pr) * cols + pc];
      int off = 0;
      for (int y = 0; y < patch; ++y) {
        for (int x = 0; x < patch; ++x) {
          for (int c = 0; c < 3; ++c) {
            img.at(pr * patch + y, pc * patch + x, c) = vec[static_cast<std::size_t>(off++)];
          }
        }
      }
    }
  }
  return img;
}

Image random_image(Rng& rng, int size) {
  Image img(size, size);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

// reference Lloyd's on raw points, random init, used as a restart oracle
double reference_kmeans_error(const std::vector<std::vector<double>>& points, int k, int iters,
                              std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = points.size();
  const std::size_t dim = points[0].size();
  std::vector<std::vector<double>> centers;
  std::vector<std::size_t> picks;
  while (picks.size() < static_cast<std::size_t>(k)) {
    const std::size_t p = rng.below(n);
    if (std::find(picks.begin(), picks.end(), p) == picks.end()) picks.push_back(p);
  }
  for (const std::size_t p : picks) centers.push_back(points[p]);

  std::vector<int> assign(n, 0);
  double err = 0.0;
  for (int it = 0; it < iters; ++it) {
    err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (int c = 0; c < k; ++c) {
        double d = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double diff = points[i][j] - centers[static_cast<std::size_t>(c)][j];
          d += diff * diff;
        }
        if (d < best) {
          best = d;
          assign[i] = c;
        }
      }
      err += best;
    }
    std::vector<std::vector<double>> sums(static_cast<std::size_t>(k),
                                          std::vector<double>(dim, 0.0));
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[static_cast<std::size_t>(assign[i])]++;
      for (std::size_t j = 0; j < dim; ++j) {
        sums[static_cast<std::size_t>(assign[i])][j] += points[i][j];
      }
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        for (std::size_t j = 0; j < dim; ++j) {
          centers[static_cast<std::size_t>(c)][j] =
              sums[static_cast<std::size_t>(c)][j] / counts[static_cast<std::size_t>(c)];
        }
      }
    }
  }
  return err / static_cast<double>(n);
}

}  // namespace

TEST_CASE("two distinct patch values with K=2 recover both exactly") {
  const std::vector<float> a(12, 0.25f);
  const std::vector<float> b(12, 0.75f);
  const Image img = image_from_patches({a, b, b, a}, 2, 2);
  const Codebook cb = fit_codebook({img, img}, 2, 2, 5, 42);
  bool has_a = false, has_b = false;
  for (int c = 0; c < 2; ++c) {
    if (cb.code(c)[0] == 0.25f) has_a = true;
    if (cb.code(c)[0] == 0.75f) has_b = true;
    for (int j = 1; j < cb.dim; ++j) CHECK(cb.code(c)[j] == cb.code(c)[0]);
  }
  CHECK(has_a);
  CHECK(has_b);
}

TEST_CASE("K=1 yields the global patch mean") {
  Rng rng(5);
  const Image img = random_image(rng, 8);
  const Codebook cb = fit_codebook({img}, 1, 4, 3, 0);
  const std::vector<float> patches = detail::extract_patches(img, 4);
  const int n = static_cast<int>(patches.size()) / cb.dim;
  for (int j = 0; j < cb.dim; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += patches[static_cast<std::size_t>(i) * cb.dim + j];
    mean /= n;
    CHECK(cb.code(0)[j] == doctest::Approx(mean).epsilon(1e-6));
  }
}

TEST_CASE("four well-separated clusters match a best-of-50-restart oracle within 1%") {
  Rng rng(99);
  const double centers[4] = {0.1, 0.38, 0.62, 0.9};
  std::vector<std::vector<float>> patch_vecs;
  std::vector<std::vector<double>> points;
  for (int i = 0; i < 64; ++i) {
    const int cluster = i % 4;
    std::vector<float> v(12);
    std::vector<double> p(12);
    for (int j = 0; j < 12; ++j) {
      v[static_cast<std::size_t>(j)] =
          static_cast<float>(centers[cluster] + rng.uniform(-0.03, 0.03));
      p[static_cast<std::size_t>(j)] = v[static_cast<std::size_t>(j)];
    }
    patch_vecs.push_back(v);
    points.push_back(p);
  }
  const Image img = image_from_patches(patch_vecs, 2, 8);

  FitTrace trace;
  fit_codebook({img}, 4, 2, 20, 7, &trace);
  const double ours = trace.iteration_mse.back();

  double best = std::numeric_limits<double>::max();
  for (int restart = 0; restart < 50; ++restart) {
    best = std::min(best, reference_kmeans_error(points, 4, 20,
                                                 0xBEEF + static_cast<std::uint64_t>(restart)));
  }
  CHECK(ours <= best * 1.01 + 1e-12);
}

TEST_CASE("k-means error is non-increasing across iterations") {
  Rng rng(123);
  std::vector<Image> images;
  for (int i = 0; i < 6; ++i) images.push_back(random_image(rng, 16));
  FitTrace trace;
  fit_codebook(images, 17, 4, 12, 3, &trace);
  REQUIRE(trace.iteration_mse.size() == 12);
  for (std::size_t i = 1; i < trace.iteration_mse.size(); ++i) {
    CHECK(trace.iteration_mse[i] <= trace.iteration_mse[i - 1] + 1e-9);
  }
}

TEST_CASE("same seed and inputs give an identical codebook") {
  Rng rng(77);
  std::vector<Image> images{random_image(rng, 12), random_image(rng, 12)};
  const Codebook a = fit_codebook(images, 5, 4, 6, 11);
  const Codebook b = fit_codebook(images, 5, 4, 6, 11);
  REQUIRE(a.vectors.size() == b.vectors.size());
  for (std::size_t i = 0; i < a.vectors.size(); ++i) CHECK(a.vectors[i] == b.vectors[i]);
}

TEST_CASE("fit errors: too few patches, bad dims, bad iters") {
  Rng rng(1);
  const Image small = random_image(rng, 8);  // 4 patches at patch=4
  CHECK_THROWS_AS(fit_codebook({small}, 8, 4, 3, 0), std::invalid_argument);
  const Image odd(10, 10);
  CHECK_THROWS_AS(fit_codebook({odd}, 2, 4, 3, 0), std::invalid_argument);
  CHECK_THROWS_AS(fit_codebook({small}, 2, 4, 0, 0), std::invalid_argument);
}

TEST_CASE("encode: codebook-exact image round trips to exact indices") {
  Codebook cb;
  cb.k = 3;
  cb.patch = 2;
  cb.dim = 12;
  Rng rng(9);
  cb.vectors.resize(36);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform(0.05, 0.95));

  std::vector<std::vector<float>> patch_vecs;
  const std::vector<int> want{2, 0, 1, 1, 2, 0};
  for (const int id : want) {
    patch_vecs.emplace_back(cb.vectors.begin() + id * 12, cb.vectors.begin() + (id + 1) * 12);
  }
  const Image img = image_from_patches(patch_vecs, 2, 3);
  const TokenGrid grid = encode(img, cb);
  REQUIRE(grid.count() == 6);
  for (int i = 0; i < 6; ++i) {
    CHECK(grid.ids[static_cast<std::size_t>(i)] == want[static_cast<std::size_t>(i)]);
  }

  // decode(encode(x)) == x bitwise for codebook-exact images
  const Image back = decode(grid, cb);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) CHECK(back.pixels[i] == img.pixels[i]);
}

TEST_CASE("encode: constant image with K=1 is all zeros") {
  Codebook cb;
  cb.k = 1;
  cb.patch = 4;
  cb.dim = 48;
  cb.vectors.assign(48, 0.5f);
  const Image img(8, 8, 0.3f);
  const TokenGrid grid = encode(img, cb);
  for (const auto id : grid.ids) CHECK(id == 0);
}

TEST_CASE("encode matches an exhaustive nearest-neighbour scan") {
  Rng rng(31);
  Codebook cb;
  cb.k = 3;
  cb.patch = 2;
  cb.dim = 12;
  cb.vectors.resize(36);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform());
  const Image img = random_image(rng, 4);  // 2x2 patches

  const TokenGrid grid = encode(img, cb);
  const std::vector<float> patches = detail::extract_patches(img, 2);
  for (int i = 0; i < grid.count(); ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::max();
    for (int c = 0; c < cb.k; ++c) {
      double d = 0.0;
      for (int j = 0; j < cb.dim; ++j) {
        const double diff = static_cast<double>(patches[static_cast<std::size_t>(i) * 12 + j]) -
                            static_cast<double>(cb.code(c)[j]);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    CHECK(grid.ids[static_cast<std::size_t>(i)] == best);
  }
}

TEST_CASE("decode: all-zero tokens tile code 0; out-of-range id throws") {
  Rng rng(17);
  Codebook cb;
  cb.k = 2;
  cb.patch = 2;
  cb.dim = 12;
  cb.vectors.resize(24);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform(0.1, 0.9));

  TokenGrid grid;
  grid.rows = 2;
  grid.cols = 2;
  grid.ids = {0, 0, 0, 0};
  const Image img = decode(grid, cb);
  for (int pr = 0; pr < 2; ++pr) {
    for (int pc = 0; pc < 2; ++pc) {
      int off = 0;
      for (int y = 0; y < 2; ++y) {
        for (int x = 0; x < 2; ++x) {
          for (int c = 0; c < 3; ++c) {
            CHECK(img.at(pr * 2 + y, pc * 2 + x, c) == cb.code(0)[off++]);
          }
        }
      }
    }
  }
  grid.ids = {0, 2, 0, 0};
  CHECK_THROWS_AS(decode(grid, cb), std::out_of_range);
}

TEST_CASE("encode is idempotent through decode for random token grids") {
  Rng rng(53);
  Codebook cb;
  cb.k = 7;
  cb.patch = 2;
  cb.dim = 12;
  cb.vectors.resize(84);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform(0.05, 0.95));

  for (int trial = 0; trial < 20; ++trial) {
    TokenGrid grid;
    grid.rows = 3;
    grid.cols = 3;
    grid.ids.clear();
    for (int i = 0; i < 9; ++i) grid.ids.push_back(static_cast<std::int32_t>(rng.below(7)));
    const TokenGrid back = encode(decode(grid, cb), cb);
    for (int i = 0; i < 9; ++i) {
      CHECK(back.ids[static_cast<std::size_t>(i)] == grid.ids[static_cast<std::size_t>(i)]);
    }
  }
}

TEST_CASE("tokens_per_image arithmetic") {
  Codebook cb;
  cb.patch = 4;
  cb.k = 1;
  cb.dim = 48;
  CHECK(tokens_per_image(cb, 64, 64) == 256);
  CHECK(tokens_per_image(cb, 32, 32) == 64);
  CHECK_THROWS_AS(tokens_per_image(cb, 30, 32), std::invalid_argument);
  cb.patch = 32;
  cb.dim = 32 * 32 * 3;
  CHECK(tokens_per_image(cb, 32, 32) == 1);
}

TEST_CASE("codebook file round trip and corruption rejection") {
  Rng rng(61);
  Codebook cb;
  cb.k = 4;
  cb.patch = 2;
  cb.dim = 12;
  cb.vectors.resize(48);
  for (auto& v : cb.vectors) v = static_cast<float>(rng.uniform());

  const std::string path = (std::filesystem::temp_directory_path() / "cb_test.devq").string();
  write_codebook(path, cb);
  const Codebook loaded = read_codebook(path);
  CHECK(loaded.k == cb.k);
  CHECK(loaded.patch == cb.patch);
  for (std::size_t i = 0; i < cb.vectors.size(); ++i) CHECK(loaded.vectors[i] == cb.vectors[i]);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(read_codebook(path), std::runtime_error);
  std::filesystem::remove(path);
}
