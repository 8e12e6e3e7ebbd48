#include "lvm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lvm/rng.hpp"

namespace lvm {

const char* task_name(TaskId task) {
  switch (task) {
    case TaskId::seg_toy: return "seg-toy";
    case TaskId::pose_toy: return "pose-toy";
    case TaskId::derain_toy: return "derain-toy";
  }
  throw std::invalid_argument("unknown task id");
}

TaskId task_from_name(const std::string& name) {
  if (name == "seg-toy") return TaskId::seg_toy;
  if (name == "pose-toy") return TaskId::pose_toy;
  if (name == "derain-toy") return TaskId::derain_toy;
  throw std::invalid_argument("unknown task '" + name + "'");
}

std::int64_t DatasetManifest::sample_count(TaskId task) const {
  std::int64_t n = 0;
  for (const auto& e : entries) {
    if (e.task == task) ++n;
  }
  return n;
}

std::int64_t DatasetManifest::token_count(TaskId task) const {
  return sample_count(task) * 2 * tokens_per_image;
}

std::vector<TaskId> DatasetManifest::tasks() const {
  std::vector<TaskId> out;
  for (const auto& e : entries) {
    if (std::find(out.begin(), out.end(), e.task) == out.end()) out.push_back(e.task);
  }
  return out;
}

// --- scene primitives -------------------------------------------------------

namespace {

struct Color {
  float r, g, b;
};

// integer geometry so an independent rasterizer can reproduce fills exactly
struct ShapeGeom {
  enum Kind { circle, rect, triangle } kind = circle;
  int cx = 0, cy = 0, r = 0;          // circle
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // rect (inclusive bounds)
  int ax = 0, ay = 0, bx = 0, by = 0, px = 0, py = 0;  // triangle vertices
};

std::int64_t edge_side(int x0, int y0, int x1, int y1, int x, int y) {
  return static_cast<std::int64_t>(x1 - x0) * (y - y0) -
         static_cast<std::int64_t>(y1 - y0) * (x - x0);
}

bool shape_contains(const ShapeGeom& s, int x, int y) {
  switch (s.kind) {
    case ShapeGeom::circle: {
      const std::int64_t dx = x - s.cx;
      const std::int64_t dy = y - s.cy;
      return dx * dx + dy * dy <= static_cast<std::int64_t>(s.r) * s.r;
    }
    case ShapeGeom::rect:
      return x >= s.x0 && x <= s.x1 && y >= s.y0 && y <= s.y1;
    case ShapeGeom::triangle: {
      const std::int64_t d0 = edge_side(s.ax, s.ay, s.bx, s.by, x, y);
      const std::int64_t d1 = edge_side(s.bx, s.by, s.px, s.py, x, y);
      const std::int64_t d2 = edge_side(s.px, s.py, s.ax, s.ay, x, y);
      const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
      const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
      return !(has_neg && has_pos);
    }
  }
  return false;
}

void paint_shape(Image& img, const ShapeGeom& s, Color c) {
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (shape_contains(s, x, y)) {
        img.at(y, x, 0) = c.r;
        img.at(y, x, 1) = c.g;
        img.at(y, x, 2) = c.b;
      }
    }
  }
}

// Smooth two-tone gradient background; no per-pixel noise so the patch
// codebook is not spent on texture.
struct BackgroundParams {
  float base[3], amp[3], kx[3], ky[3], phase[3];
};

BackgroundParams sample_background(Rng& rng) {
  BackgroundParams p;
  for (int c = 0; c < 3; ++c) {
    p.base[c] = static_cast<float>(rng.uniform(0.30, 0.65));
    p.amp[c] = static_cast<float>(rng.uniform(0.08, 0.22));
    p.kx[c] = static_cast<float>(rng.range(0, 3));
    p.ky[c] = static_cast<float>(rng.range(0, 3));
    p.phase[c] = static_cast<float>(rng.uniform(0.0, 6.2831853));
  }
  return p;
}

Image render_background(const BackgroundParams& p, int size) {
  Image img(size, size);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const float t =
            6.2831853f * (p.kx[c] * x + p.ky[c] * y) / static_cast<float>(size) + p.phase[c];
        img.at(y, x, c) = std::clamp(p.base[c] + p.amp[c] * std::sin(t), 0.05f, 0.95f);
      }
    }
  }
  return img;
}

Image smooth_background(Rng& rng, int size) {
  return render_background(sample_background(rng), size);
}

Color random_bright_color(Rng& rng) {
  // gray value stays >= 0.4, well above the binarization threshold
  return Color{static_cast<float>(rng.uniform(0.40, 1.0)),
               static_cast<float>(rng.uniform(0.40, 1.0)),
               static_cast<float>(rng.uniform(0.40, 1.0))};
}

Color random_object_color(Rng& rng) {
  return Color{static_cast<float>(rng.uniform(0.15, 0.95)),
               static_cast<float>(rng.uniform(0.15, 0.95)),
               static_cast<float>(rng.uniform(0.15, 0.95))};
}

ShapeGeom random_shape(Rng& rng, int size) {
  ShapeGeom s;
  const int margin = size / 8;
  const int lo = margin;
  const int hi = size - 1 - margin;
  const int kind = static_cast<int>(rng.below(3));
  if (kind == 0) {
    s.kind = ShapeGeom::circle;
    s.r = static_cast<int>(rng.range(size / 7, size / 4 + 1));
    s.cx = static_cast<int>(rng.range(lo, hi + 1));
    s.cy = static_cast<int>(rng.range(lo, hi + 1));
  } else if (kind == 1) {
    s.kind = ShapeGeom::rect;
    const int hw = static_cast<int>(rng.range(size / 8, size / 4 + 1));
    const int hh = static_cast<int>(rng.range(size / 8, size / 4 + 1));
    const int cx = static_cast<int>(rng.range(lo, hi + 1));
    const int cy = static_cast<int>(rng.range(lo, hi + 1));
    s.x0 = cx - hw;
    s.x1 = cx + hw;
    s.y0 = cy - hh;
    s.y1 = cy + hh;
  } else {
    s.kind = ShapeGeom::triangle;
    const int cx = static_cast<int>(rng.range(lo, hi + 1));
    const int cy = static_cast<int>(rng.range(lo, hi + 1));
    const double radius = rng.uniform(size / 5.0, size / 3.2);
    const double a0 = rng.uniform(0.0, 2.0943951);  // up to 120 degrees
    const int vx[3] = {0, 1, 2};
    int xs[3], ys[3];
    for (int i = 0; i < 3; ++i) {
      const double ang = a0 + 2.0943951 * vx[i] + rng.uniform(-0.35, 0.35);
      xs[i] = cx + static_cast<int>(std::lround(radius * std::cos(ang)));
      ys[i] = cy + static_cast<int>(std::lround(radius * std::sin(ang)));
    }
    s.ax = xs[0]; s.ay = ys[0];
    s.bx = xs[1]; s.by = ys[1];
    s.px = xs[2]; s.py = ys[2];
  }
  return s;
}

void draw_line(Image& img, int x0, int y0, int x1, int y1, Color c) {
  // Bresenham
  const int dx = std::abs(x1 - x0);
  const int dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1;
  const int sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  int x = x0, y = y0;
  while (true) {
    if (x >= 0 && x < img.width && y >= 0 && y < img.height) {
      img.at(y, x, 0) = c.r;
      img.at(y, x, 1) = c.g;
      img.at(y, x, 2) = c.b;
    }
    if (x == x1 && y == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y += sy;
    }
  }
}

void draw_dot(Image& img, int cx, int cy, int radius, Color c) {
  for (int y = cy - radius; y <= cy + radius; ++y) {
    for (int x = cx - radius; x <= cx + radius; ++x) {
      if (x < 0 || x >= img.width || y < 0 || y >= img.height) continue;
      const int dx = x - cx;
      const int dy = y - cy;
      if (dx * dx + dy * dy <= radius * radius) {
        img.at(y, x, 0) = c.r;
        img.at(y, x, 1) = c.g;
        img.at(y, x, 2) = c.b;
      }
    }
  }
}

}  // namespace

// --- generators --------------------------------------------------------------

namespace {

std::vector<SegShape> seg_scene_from(Rng& rng, int image_size) {
  std::vector<SegShape> shapes;
  const int n_shapes = 2 + static_cast<int>(rng.below(3));
  for (int i = 0; i < n_shapes; ++i) {
    const ShapeGeom geom = random_shape(rng, image_size);
    const Color input_color = random_object_color(rng);
    const Color annotation_color = random_bright_color(rng);
    SegShape s;
    s.kind = static_cast<int>(geom.kind);
    s.cx = geom.cx;
    s.cy = geom.cy;
    s.r = geom.r;
    s.x0 = geom.x0;
    s.y0 = geom.y0;
    s.x1 = geom.x1;
    s.y1 = geom.y1;
    s.ax = geom.ax;
    s.ay = geom.ay;
    s.bx = geom.bx;
    s.by = geom.by;
    s.px = geom.px;
    s.py = geom.py;
    s.input_color[0] = input_color.r;
    s.input_color[1] = input_color.g;
    s.input_color[2] = input_color.b;
    s.annotation_color[0] = annotation_color.r;
    s.annotation_color[1] = annotation_color.g;
    s.annotation_color[2] = annotation_color.b;
    shapes.push_back(s);
  }
  return shapes;
}

ShapeGeom to_geom(const SegShape& s) {
  ShapeGeom g;
  g.kind = static_cast<ShapeGeom::Kind>(s.kind);
  g.cx = s.cx;
  g.cy = s.cy;
  g.r = s.r;
  g.x0 = s.x0;
  g.y0 = s.y0;
  g.x1 = s.x1;
  g.y1 = s.y1;
  g.ax = s.ax;
  g.ay = s.ay;
  g.bx = s.bx;
  g.by = s.by;
  g.px = s.px;
  g.py = s.py;
  return g;
}

}  // namespace

std::vector<SegShape> seg_scene(std::uint64_t seed, int image_size) {
  Rng rng(seed);
  sample_background(rng);  // keep the RNG stream aligned with gen_seg_sample
  return seg_scene_from(rng, image_size);
}

SamplePair gen_seg_sample(std::uint64_t seed, int image_size) {
  Rng rng(seed);
  SamplePair pair;
  pair.task = TaskId::seg_toy;
  pair.input = render_background(sample_background(rng), image_size);
  pair.annotation = Image(image_size, image_size, 0.0f);

  for (const SegShape& s : seg_scene_from(rng, image_size)) {
    paint_shape(pair.input, to_geom(s), Color{s.input_color[0], s.input_color[1], s.input_color[2]});
    paint_shape(pair.annotation, to_geom(s),
                Color{s.annotation_color[0], s.annotation_color[1], s.annotation_color[2]});
  }
  return pair;
}

SamplePair gen_pose_sample(std::uint64_t seed, int image_size) {
  Rng rng(seed);
  SamplePair pair;
  pair.task = TaskId::pose_toy;
  pair.input = smooth_background(rng, image_size);
  pair.annotation = Image(image_size, image_size, 0.0f);

  const int s = image_size;
  const int head_x = static_cast<int>(rng.range(s / 4, 3 * s / 4));
  const int head_y = static_cast<int>(rng.range(s / 6, s / 3));
  const int pelvis_x = head_x + static_cast<int>(rng.range(-s / 10, s / 10 + 1));
  const int pelvis_y = static_cast<int>(rng.range(s / 2, 2 * s / 3));
  const int neck_x = head_x + (pelvis_x - head_x) / 4;
  const int neck_y = head_y + (pelvis_y - head_y) / 4;

  std::vector<std::pair<int, int>> joints{{head_x, head_y}};
  auto limb_end = [&](int fallback_x, int fallback_y, int min_y, int max_y) {
    // joints kept >= 4px apart so the five annotation dots never merge
    for (int attempt = 0; attempt < 64; ++attempt) {
      const int x = static_cast<int>(rng.range(2, s - 2));
      const int y = static_cast<int>(rng.range(min_y, max_y));
      bool clear = true;
      for (const auto& [jx, jy] : joints) {
        const int ddx = x - jx, ddy = y - jy;
        if (ddx * ddx + ddy * ddy < 16) clear = false;
      }
      if (clear) {
        joints.emplace_back(x, y);
        return std::pair<int, int>{x, y};
      }
    }
    const auto fallback = std::pair<int, int>{std::clamp(fallback_x + 6, 0, s - 1),
                                              std::clamp(fallback_y + 6, 0, s - 1)};
    joints.push_back(fallback);
    return fallback;
  };

  const auto [hand_l_x, hand_l_y] = limb_end(neck_x, neck_y, head_y, pelvis_y + s / 6);
  const auto [hand_r_x, hand_r_y] = limb_end(neck_x, neck_y, head_y, pelvis_y + s / 6);
  const auto [foot_l_x, foot_l_y] = limb_end(pelvis_x, pelvis_y, 3 * s / 4, s - 2);
  const auto [foot_r_x, foot_r_y] = limb_end(pelvis_x, pelvis_y, 3 * s / 4, s - 2);

  auto draw_skeleton = [&](Image& img, Color line) {
    draw_line(img, head_x, head_y, pelvis_x, pelvis_y, line);
    draw_line(img, neck_x, neck_y, hand_l_x, hand_l_y, line);
    draw_line(img, neck_x, neck_y, hand_r_x, hand_r_y, line);
    draw_line(img, pelvis_x, pelvis_y, foot_l_x, foot_l_y, line);
    draw_line(img, pelvis_x, pelvis_y, foot_r_x, foot_r_y, line);
  };

  draw_skeleton(pair.input, Color{0.12f, 0.12f, 0.12f});
  draw_dot(pair.input, head_x, head_y, 2, Color{0.12f, 0.12f, 0.12f});

  draw_skeleton(pair.annotation, Color{0.35f, 0.35f, 0.35f});
  // fixed joint palette, one dot per joint, drawn over the skeleton
  draw_dot(pair.annotation, head_x, head_y, 1, Color{1.0f, 0.25f, 0.25f});
  draw_dot(pair.annotation, hand_l_x, hand_l_y, 1, Color{0.25f, 1.0f, 0.25f});
  draw_dot(pair.annotation, hand_r_x, hand_r_y, 1, Color{0.25f, 0.5f, 1.0f});
  draw_dot(pair.annotation, foot_l_x, foot_l_y, 1, Color{1.0f, 1.0f, 0.25f});
  draw_dot(pair.annotation, foot_r_x, foot_r_y, 1, Color{1.0f, 0.25f, 1.0f});
  return pair;
}

SamplePair gen_derain_sample(std::uint64_t seed, int image_size) {
  Rng rng(seed);
  SamplePair pair;
  pair.task = TaskId::derain_toy;

  Image clean = smooth_background(rng, image_size);
  const int n_shapes = 1 + static_cast<int>(rng.below(3));
  for (int i = 0; i < n_shapes; ++i) {
    const ShapeGeom geom = random_shape(rng, image_size);
    paint_shape(clean, geom, random_object_color(rng));
  }
  pair.annotation = clean;

  Image rainy = clean;
  const int n_streaks = 4 + static_cast<int>(rng.below(5));
  for (int i = 0; i < n_streaks; ++i) {
    const int x0 = static_cast<int>(rng.range(0, image_size));
    const int y0 = static_cast<int>(rng.range(0, image_size));
    const int len = static_cast<int>(rng.range(image_size / 4, image_size / 2 + 1));
    // streaks fall steeply, with a small random tilt
    const double ang = 1.2566 + rng.uniform(-0.25, 0.25);
    const int x1 = x0 + static_cast<int>(std::lround(len * std::cos(ang)));
    const int y1 = y0 + static_cast<int>(std::lround(len * std::sin(ang)));
    const float v = static_cast<float>(rng.uniform(0.85, 1.0));
    draw_line(rainy, x0, y0, x1, y1, Color{v, v, v});
  }
  pair.input = rainy;
  return pair;
}

SamplePair gen_sample(TaskId task, std::uint64_t seed, int image_size) {
  switch (task) {
    case TaskId::seg_toy: return gen_seg_sample(seed, image_size);
    case TaskId::pose_toy: return gen_pose_sample(seed, image_size);
    case TaskId::derain_toy: return gen_derain_sample(seed, image_size);
  }
  throw std::invalid_argument("unknown task id");
}

namespace {

std::vector<SamplePair> gen_many(TaskId task, int n, std::uint64_t seed, int image_size) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  std::vector<SamplePair> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    out.push_back(gen_sample(task, derive_seed(seed, static_cast<std::uint64_t>(i)), image_size));
  }
  return out;
}

}  // namespace

std::vector<SamplePair> gen_seg_toy(int n, std::uint64_t seed, int image_size) {
  return gen_many(TaskId::seg_toy, n, seed, image_size);
}
std::vector<SamplePair> gen_pose_toy(int n, std::uint64_t seed, int image_size) {
  return gen_many(TaskId::pose_toy, n, seed, image_size);
}
std::vector<SamplePair> gen_derain_toy(int n, std::uint64_t seed, int image_size) {
  return gen_many(TaskId::derain_toy, n, seed, image_size);
}

// --- augmentation --------------------------------------------------------------

CropParams sample_crop_params(std::uint64_t seed, int height, int width) {
  Rng rng(seed);
  CropParams p;
  const double scale = rng.uniform(0.6, 1.0);
  const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double aspect = std::exp(log_ratio);
  const double area = scale * height * width;
  p.crop_w = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, width);
  p.crop_h = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, height);
  p.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(width - p.crop_w + 1)));
  p.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(height - p.crop_h + 1)));
  p.flip = rng.bernoulli(0.5);
  return p;
}

Image apply_crop(const Image& img, const CropParams& params) {
  Image crop(params.crop_h, params.crop_w);
  for (int y = 0; y < params.crop_h; ++y) {
    for (int x = 0; x < params.crop_w; ++x) {
      for (int c = 0; c < 3; ++c) crop.at(y, x, c) = img.at(params.y0 + y, params.x0 + x, c);
    }
  }
  Image resized = resize_bilinear(crop, img.height, img.width);
  return params.flip ? hflip(resized) : resized;
}

SamplePair augment(const SamplePair& pair, std::uint64_t seed) {
  const CropParams params = sample_crop_params(seed, pair.input.height, pair.input.width);
  SamplePair out;
  out.task = pair.task;
  out.input = apply_crop(pair.input, params);
  out.annotation = apply_crop(pair.annotation, params);
  return out;
}

// --- manifests -------------------------------------------------------------------

DatasetManifest make_manifest(const std::vector<TaskSpec>& tasks, std::uint64_t seed,
                              int image_size, int tokens_per_image) {
  DatasetManifest m;
  m.image_size = image_size;
  m.tokens_per_image = tokens_per_image;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (tasks[t].count < 1) {
      throw std::invalid_argument(std::string("task ") + task_name(tasks[t].task) +
                                  " has count < 1");
    }
    const std::uint64_t base = derive_seed(seed, 0x1000u + static_cast<std::uint64_t>(tasks[t].task));
    for (int i = 0; i < tasks[t].count; ++i) {
      ManifestEntry e;
      e.task = tasks[t].task;
      e.source_seed = derive_seed(base, static_cast<std::uint64_t>(i));
      m.entries.push_back(e);
    }
  }
  return m;
}

SamplePair materialize(const ManifestEntry& entry, int image_size) {
  SamplePair pair = gen_sample(entry.task, entry.source_seed, image_size);
  if (entry.provenance == Provenance::augmented) {
    pair = augment(pair, entry.augment_seed);
  }
  return pair;
}

namespace {

struct TaskBlock {
  TaskId task;
  std::vector<ManifestEntry> entries;
};

std::vector<TaskBlock> split_blocks(const DatasetManifest& m) {
  std::vector<TaskBlock> blocks;
  for (const auto& e : m.entries) {
    auto it = std::find_if(blocks.begin(), blocks.end(),
                           [&](const TaskBlock& b) { return b.task == e.task; });
    if (it == blocks.end()) {
      blocks.push_back(TaskBlock{e.task, {}});
      it = blocks.end() - 1;
    }
    it->entries.push_back(e);
  }
  return blocks;
}

DatasetManifest join_blocks(const DatasetManifest& proto, const std::vector<TaskBlock>& blocks) {
  DatasetManifest out;
  out.image_size = proto.image_size;
  out.tokens_per_image = proto.tokens_per_image;
  for (const auto& b : blocks) {
    out.entries.insert(out.entries.end(), b.entries.begin(), b.entries.end());
  }
  return out;
}

}  // namespace

DatasetManifest balance_by_resampling(const DatasetManifest& m) {
  auto blocks = split_blocks(m);
  std::size_t head = 0;
  for (const auto& b : blocks) head = std::max(head, b.entries.size());
  for (auto& b : blocks) {
    const std::size_t original = b.entries.size();
    for (std::size_t i = 0; b.entries.size() < head; ++i) {
      ManifestEntry copy = b.entries[i % original];
      copy.provenance = Provenance::resampled;
      copy.augment_seed = 0;
      b.entries.push_back(copy);
    }
  }
  return join_blocks(m, blocks);
}

DatasetManifest balance_by_augmentation(const DatasetManifest& m, std::uint64_t seed,
                                        int max_factor) {
  auto blocks = split_blocks(m);
  std::size_t head = 0;
  for (const auto& b : blocks) head = std::max(head, b.entries.size());
  for (auto& b : blocks) {
    const std::size_t original = b.entries.size();
    const std::size_t factor = (head + original - 1) / original;
    if (factor > static_cast<std::size_t>(max_factor)) {
      throw std::runtime_error(std::string("balance_by_augmentation: task ") +
                               task_name(b.task) + " needs factor " + std::to_string(factor) +
                               " > max " + std::to_string(max_factor));
    }
    const std::uint64_t task_seed = derive_seed(seed, static_cast<std::uint64_t>(b.task));
    for (std::size_t i = 0; b.entries.size() < head; ++i) {
      ManifestEntry copy = b.entries[i % original];
      copy.provenance = Provenance::augmented;
      copy.augment_seed = derive_seed(task_seed, i);
      b.entries.push_back(copy);
    }
  }
  return join_blocks(m, blocks);
}

DatasetManifest data_fraction(const DatasetManifest& m, double fraction, std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0) {
    throw std::invalid_argument("data_fraction: fraction must be in (0,1]");
  }
  for (const auto& e : m.entries) {
    if (e.provenance != Provenance::original) {
      throw std::invalid_argument("data_fraction applies to manifests of originals only");
    }
  }
  auto blocks = split_blocks(m);
  for (auto& b : blocks) {
    const std::size_t n = b.entries.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b.task)));
    rng.shuffle(order);
    std::size_t keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    keep = std::max<std::size_t>(1, std::min(keep, n));
    std::vector<std::size_t> selected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
    std::sort(selected.begin(), selected.end());
    std::vector<ManifestEntry> kept;
    kept.reserve(keep);
    for (std::size_t idx : selected) kept.push_back(b.entries[idx]);
    b.entries = std::move(kept);
  }
  return join_blocks(m, blocks);
}

DatasetManifest manifest_subset(const DatasetManifest& m, TaskId task) {
  DatasetManifest out;
  out.image_size = m.image_size;
  out.tokens_per_image = m.tokens_per_image;
  for (const auto& e : m.entries) {
    if (e.task == task) out.entries.push_back(e);
  }
  return out;
}

DatasetManifest repeat_entries(const DatasetManifest& m, int times) {
  if (times < 1) throw std::invalid_argument("repeat_entries: times must be >= 1");
  auto blocks = split_blocks(m);
  for (auto& b : blocks) {
    const std::size_t original = b.entries.size();
    for (int rep = 1; rep < times; ++rep) {
      for (std::size_t i = 0; i < original; ++i) {
        ManifestEntry copy = b.entries[i];
        copy.provenance = Provenance::resampled;
        copy.augment_seed = 0;
        b.entries.push_back(copy);
      }
    }
  }
  return join_blocks(m, blocks);
}

DatasetManifest extend_by_augmentation(const DatasetManifest& m, int factor, std::uint64_t seed) {
  if (factor < 1) throw std::invalid_argument("extend_by_augmentation: factor must be >= 1");
  auto blocks = split_blocks(m);
  for (auto& b : blocks) {
    const std::size_t original = b.entries.size();
    const std::uint64_t task_seed = derive_seed(seed, static_cast<std::uint64_t>(b.task));
    const std::size_t target = original * static_cast<std::size_t>(factor);
    for (std::size_t i = 0; b.entries.size() < target; ++i) {
      ManifestEntry copy = b.entries[i % original];
      copy.provenance = Provenance::augmented;
      copy.augment_seed = derive_seed(task_seed, i);
      b.entries.push_back(copy);
    }
  }
  return join_blocks(m, blocks);
}

// --- sentences ---------------------------------------------------------------------

std::vector<VisualSentence> build_sentences(const DatasetManifest& m, const Codebook& cb,
                                            int context_length, bool shuffle,
                                            std::uint64_t seed) {
  const int tpi = tokens_per_image(cb, m.image_size, m.image_size);
  if (tpi != m.tokens_per_image) {
    throw std::invalid_argument("manifest expects " + std::to_string(m.tokens_per_image) +
                                " tokens per image but codebook yields " + std::to_string(tpi));
  }
  const int pair_tokens = 2 * tpi;
  if (context_length < pair_tokens) {
    throw std::invalid_argument("context length " + std::to_string(context_length) +
                                " cannot hold one image pair of " + std::to_string(pair_tokens) +
                                " tokens");
  }
  if (context_length % pair_tokens != 0) {
    throw std::invalid_argument("context length " + std::to_string(context_length) +
                                " not divisible by pair length " + std::to_string(pair_tokens));
  }
  const int pairs_per_sentence = context_length / pair_tokens;

  auto blocks = split_blocks(m);
  std::vector<VisualSentence> sentences;
  for (std::size_t t = 0; t < blocks.size(); ++t) {
    auto& block = blocks[t];
    if (shuffle) {
      Rng rng(derive_seed(seed, 0x5A0000u + static_cast<std::uint64_t>(block.task)));
      rng.shuffle(block.entries);
    }
    VisualSentence current;
    current.task = block.task;
    int pairs_in_current = 0;
    for (const auto& entry : block.entries) {
      const SamplePair pair = materialize(entry, m.image_size);
      const TokenGrid in_tokens = encode(pair.input, cb);
      const TokenGrid ann_tokens = encode(pair.annotation, cb);
      current.boundaries.push_back(static_cast<std::int32_t>(current.tokens.size()));
      current.tokens.insert(current.tokens.end(), in_tokens.ids.begin(), in_tokens.ids.end());
      current.boundaries.push_back(static_cast<std::int32_t>(current.tokens.size()));
      current.tokens.insert(current.tokens.end(), ann_tokens.ids.begin(), ann_tokens.ids.end());
      if (++pairs_in_current == pairs_per_sentence) {
        sentences.push_back(std::move(current));
        current = VisualSentence{};
        current.task = block.task;
        pairs_in_current = 0;
      }
    }
    // trailing partial sentence dropped
  }
  if (shuffle) {
    Rng rng(derive_seed(seed, 0x5B0000u));
    rng.shuffle(sentences);
  }
  return sentences;
}

// --- files -----------------------------------------------------------------------------

namespace {

const char* provenance_name(Provenance p) {
  switch (p) {
    case Provenance::original: return "original";
    case Provenance::resampled: return "resampled";
    case Provenance::augmented: return "augmented";
  }
  throw std::invalid_argument("unknown provenance");
}

Provenance provenance_from_name(const std::string& s) {
  if (s == "original") return Provenance::original;
  if (s == "resampled") return Provenance::resampled;
  if (s == "augmented") return Provenance::augmented;
  throw std::runtime_error("unknown provenance '" + s + "'");
}

}  // namespace

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  nlohmann::json header{{"image_size", m.image_size}, {"tokens_per_image", m.tokens_per_image}};
  out << header.dump() << "\n";
  for (const auto& e : m.entries) {
    nlohmann::json rec{{"task", task_name(e.task)},
                       {"source_seed", e.source_seed},
                       {"provenance", provenance_name(e.provenance)}};
    if (e.provenance == Provenance::augmented) rec["augment_seed"] = e.augment_seed;
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty manifest '" + path + "'");
  nlohmann::json header = nlohmann::json::parse(line);
  DatasetManifest m;
  m.image_size = header.at("image_size").get<int>();
  m.tokens_per_image = header.at("tokens_per_image").get<int>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    ManifestEntry e;
    e.task = task_from_name(rec.at("task").get<std::string>());
    e.source_seed = rec.at("source_seed").get<std::uint64_t>();
    e.provenance = provenance_from_name(rec.at("provenance").get<std::string>());
    if (e.provenance == Provenance::augmented) e.augment_seed = rec.at("augment_seed").get<std::uint64_t>();
    m.entries.push_back(e);
  }
  return m;
}

namespace {

constexpr char kTokenMagic[8] = {'D', 'E', 'T', 'K', '0', '0', '0', '1'};

}  // namespace

void write_token_cache(const std::string& path, const std::vector<VisualSentence>& sentences) {
  if (sentences.empty()) throw std::invalid_argument("write_token_cache: no sentences");
  const std::size_t len = sentences[0].tokens.size();
  for (const auto& s : sentences) {
    if (s.tokens.size() != len) {
      throw std::invalid_argument("write_token_cache: sentences have mixed lengths");
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write(kTokenMagic, sizeof(kTokenMagic));
  const std::uint32_t len32 = static_cast<std::uint32_t>(len);
  const std::uint32_t count = static_cast<std::uint32_t>(sentences.size());
  out.write(reinterpret_cast<const char*>(&len32), sizeof(len32));
  out.write(reinterpret_cast<const char*>(&count), sizeof(count));
  std::vector<std::uint16_t> row(len);
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < len; ++i) {
      if (s.tokens[i] < 0 || s.tokens[i] > 0xFFFF) {
        throw std::runtime_error("token id " + std::to_string(s.tokens[i]) +
                                 " does not fit the u16 cache format");
      }
      row[i] = static_cast<std::uint16_t>(s.tokens[i]);
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(std::uint16_t)));
  }
  if (!out) throw std::runtime_error("short write to '" + path + "'");
}

std::vector<VisualSentence> read_token_cache(const std::string& path, TaskId task,
                                             int tokens_per_image) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kTokenMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad token cache magic (expected DETK0001) in '" + path + "'");
  }
  std::uint32_t len = 0, count = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  in.read(reinterpret_cast<char*>(&count), sizeof(count));
  if (!in) throw std::runtime_error("truncated token cache header in '" + path + "'");
  std::vector<VisualSentence> sentences(count);
  std::vector<std::uint16_t> row(len);
  for (auto& s : sentences) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(std::uint16_t)));
    if (!in) throw std::runtime_error("truncated token cache body in '" + path + "'");
    s.task = task;
    s.tokens.assign(row.begin(), row.end());
    if (tokens_per_image > 0) {
      for (std::uint32_t off = 0; off < len; off += static_cast<std::uint32_t>(tokens_per_image)) {
        s.boundaries.push_back(static_cast<std::int32_t>(off));
      }
    }
  }
  return sentences;
}

}  // namespace lvm
