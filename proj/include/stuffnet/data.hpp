#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stuffnet/boxgeom.hpp"
#include "stuffnet/tensor.hpp"

namespace stuffnet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Canonical stuff classes, index order fixed; background is 0.
inline const std::vector<std::string>& canonical_stuff_classes() {
  static const std::vector<std::string> names{"background", "wall", "floor",  "water",    "tree",
                                              "sky",        "road", "ground", "building", "mountain"};
  return names;
}

class StuffVocabulary {
 public:
  StuffVocabulary()
      : names_(canonical_stuff_classes()),
        merges_{{"sidewalk", "road"}, {"runway", "road"},    {"ceiling", "wall"}, {"grass", "ground"},
                {"platform", "ground"}, {"sand", "ground"}, {"snow", "ground"}} {}

  const std::vector<std::string>& names() const { return names_; }
  size_t size() const { return names_.size(); }

  int index_of(const std::string& canonical) const {
    for (size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == canonical) return static_cast<int>(i);
    return -1;
  }

  // Raw (dataset-specific) name -> canonical name. Throws on unknown names.
  std::string canonical(const std::string& raw) const {
    if (index_of(raw) >= 0) return raw;
    auto it = merges_.find(raw);
    if (it == merges_.end()) throw DataError("unknown stuff class name: " + raw);
    return it->second;
  }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::string> merges_;
};

/// Maps a raw label map (indices into raw_names) to canonical vocabulary indices.
inline std::vector<int> merge_stuff_classes(std::span<const int> raw_map, std::span<const std::string> raw_names,
                                            const StuffVocabulary& vocab) {
  std::vector<int> lut(raw_names.size());
  std::vector<std::string> unknown;
  for (size_t i = 0; i < raw_names.size(); ++i) {
    try {
      lut[i] = vocab.index_of(vocab.canonical(raw_names[i]));
    } catch (const DataError&) {
      unknown.push_back(raw_names[i]);
    }
  }
  if (!unknown.empty()) {
    std::string msg = "merge_stuff_classes: unknown raw class names:";
    for (const auto& u : unknown) msg += " " + u;
    throw DataError(msg);
  }
  std::vector<int> out(raw_map.size());
  for (size_t i = 0; i < raw_map.size(); ++i) {
    const int r = raw_map[i];
    if (r < 0 || static_cast<size_t>(r) >= lut.size())
      throw DataError("merge_stuff_classes: raw label index " + std::to_string(r) + " out of range");
    out[i] = lut[static_cast<size_t>(r)];
  }
  return out;
}

inline std::vector<std::string> object_class_names(int object_classes) {
  static const std::array<const char*, 4> base{"boat", "plane", "car", "cow"};
  std::vector<std::string> names{"__background__"};
  for (int i = 1; i <= object_classes; ++i)
    names.push_back(i <= 4 ? base[static_cast<size_t>(i - 1)] : "object" + std::to_string(i));
  return names;
}

struct SceneGenSpec {
  int image_size = 64;
  int num_images = 10;
  double rho = 0.9;          // P(object class is fixed by the surrounding stuff)
  int object_classes = 4;    // foreground classes, excluding background
  int regime = 10;           // 10: stuff-only labels; 30: object pixels carry object classes
  int min_objects = 1;
  int max_objects = 5;
  int small_min_side = 6;
  int small_max_side = 15;
  int large_min_side = 16;
  int large_max_side = 36;
  double small_fraction = 0.5;  // per-scene lower bound on the share of small objects
  double noise = 0.06;
  bool with_seg = true;
  uint64_t seed = 1;

  int seg_classes() const { return regime == 30 ? 10 + object_classes : 10; }

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument(m); };
    if (!(rho >= 0.0 && rho <= 1.0)) fail("data.rho must be in [0,1] (got " + std::to_string(rho) + ")");
    if (image_size < 16) fail("data.image_size must be >= 16");
    if (num_images < 0) fail("data.num_images must be >= 0");
    if (object_classes < 1) fail("data.object_classes must be >= 1");
    if (regime != 10 && regime != 30) fail("data.regime must be 10 or 30");
    if (regime == 30 && 10 + object_classes > 255) fail("data.object_classes too large for 8-bit label maps");
    if (min_objects < 1 || max_objects < min_objects) fail("data.min_objects/max_objects out of order");
    if (small_min_side < 2 || small_max_side < small_min_side || large_min_side < 2 ||
        large_max_side < large_min_side)
      fail("data: object side ranges out of order");
    if (small_max_side > image_size || large_max_side > image_size)
      fail("data: object size exceeds image size " + std::to_string(image_size));
    if (!(small_fraction >= 0.0 && small_fraction <= 1.0)) fail("data.small_fraction must be in [0,1]");
    if (!(noise >= 0.0 && noise <= 0.5)) fail("data.noise must be in [0,0.5]");
  }
};

struct SceneSample {
  int id = 0;
  int height = 0, width = 0;
  Tensor image;               // [3, H, W] in [0, 1]
  std::vector<Box> gt_boxes;  // label = object class (1-based)
  std::vector<int> seg_labels;  // H*W, empty when the dataset has no stuff labels
  // Per-object "context" flag: class chosen by the surrounding stuff. Not persisted.
  std::vector<bool> context_driven;

  bool has_seg() const { return !seg_labels.empty(); }
};

// Object class paired with each stuff class (stuff 1..9).
inline int associated_object_class(int stuff, int object_classes) { return 1 + (stuff - 1) % object_classes; }

inline std::array<double, 3> stuff_color(int stuff) {
  static const std::array<std::array<double, 3>, 10> colors{{{0.50, 0.50, 0.50},
                                                             {0.92, 0.88, 0.80},
                                                             {0.50, 0.30, 0.12},
                                                             {0.10, 0.30, 0.80},
                                                             {0.10, 0.50, 0.15},
                                                             {0.55, 0.80, 0.97},
                                                             {0.22, 0.22, 0.25},
                                                             {0.72, 0.62, 0.35},
                                                             {0.68, 0.15, 0.15},
                                                             {0.45, 0.35, 0.60}}};
  return colors[static_cast<size_t>(stuff)];
}

inline std::array<double, 3> object_color(int cls) {
  static const std::array<std::array<double, 3>, 4> colors{
      {{1.00, 0.55, 0.00}, {0.00, 0.95, 0.95}, {1.00, 1.00, 0.10}, {0.60, 1.00, 0.20}}};
  if (cls >= 1 && cls <= 4) return colors[static_cast<size_t>(cls - 1)];
  const double t = std::fmod(0.37 * cls, 1.0);
  return {0.5 + 0.5 * t, 1.0 - t, 0.3 + 0.4 * t};
}

enum class ShapeKind { rect = 0, ellipse = 1, triangle = 2, diamond = 3 };

inline bool shape_covers(ShapeKind s, double u, double v) {
  // u, v in [-1, 1] relative to the box
  switch (s) {
    case ShapeKind::rect: return true;
    case ShapeKind::ellipse: return u * u + v * v <= 1.0;
    case ShapeKind::triangle: return std::abs(u) <= (v + 1.0) / 2.0;
    case ShapeKind::diamond: return std::abs(u) + std::abs(v) <= 1.0;
  }
  return true;
}

/// Deterministic synthetic scene for (spec.seed, index).
inline SceneSample generate_scene(const SceneGenSpec& spec, int index) {
  spec.validate();
  const int n = spec.image_size;
  Rng rng = Rng(spec.seed).split(static_cast<uint64_t>(index));
  SceneSample s;
  s.id = index;
  s.height = s.width = n;
  s.image = Tensor({3, n, n});

  // Horizontal stuff bands with distinct classes.
  const int nbands = rng.uniform_int(2, 4);
  std::vector<int> pool{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<double> weights(static_cast<size_t>(nbands));
  double wsum = 0;
  for (double& w : weights) wsum += (w = rng.uniform(1.0, 2.0));
  std::vector<int> row_stuff(static_cast<size_t>(n));
  double acc = 0;
  int row = 0;
  for (int b = 0; b < nbands; ++b) {
    acc += weights[static_cast<size_t>(b)];
    const int end = b + 1 == nbands ? n : static_cast<int>(std::lround(acc / wsum * n));
    for (; row < end; ++row) row_stuff[static_cast<size_t>(row)] = pool[static_cast<size_t>(b)];
  }

  std::vector<int> stuff_map(static_cast<size_t>(n) * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const int st = row_stuff[static_cast<size_t>(y)];
      stuff_map[static_cast<size_t>(y) * n + x] = st;
      const auto c = stuff_color(st);
      for (int ch = 0; ch < 3; ++ch) s.image[(static_cast<size_t>(ch) * n + y) * n + x] = c[static_cast<size_t>(ch)];
    }

  // Object sizes: the first ceil(small_fraction * count) are small.
  const int count = rng.uniform_int(spec.min_objects, spec.max_objects);
  const int nsmall = static_cast<int>(std::ceil(spec.small_fraction * count - 1e-12));
  struct Placed {
    Box box;
    bool small;
    bool context;
    ShapeKind shape;
    std::array<double, 3> color;
  };
  std::vector<Placed> placed;
  for (int j = 0; j < count; ++j) {
    const bool small = j < nsmall;
    const int lo = small ? spec.small_min_side : spec.large_min_side;
    const int hi = small ? spec.small_max_side : spec.large_max_side;
    const int w = rng.uniform_int(lo, hi), h = rng.uniform_int(lo, hi);
    const bool context = rng.uniform() < spec.rho;
    const int random_cls = rng.uniform_int(1, spec.object_classes);
    const int shape_pick = rng.uniform_int(0, 3);
    const double shade = rng.uniform(-0.1, 0.1);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const int x0 = rng.uniform_int(0, n - w), y0 = rng.uniform_int(0, n - h);
      Box b = make_box(x0, y0, x0 + w, y0 + h);
      bool clash = false;
      for (const Placed& p : placed) {
        Box grown = make_box(p.box.x0 - 1, p.box.y0 - 1, p.box.x1 + 1, p.box.y1 + 1);
        if (iou(grown, b) > 0) clash = true;
      }
      if (clash) continue;
      const int cy = std::min(n - 1, static_cast<int>(b.cy()));
      const int under = row_stuff[static_cast<size_t>(cy)];
      Placed p{b, small, context, ShapeKind::rect, {}};
      if (context) {
        p.box.label = associated_object_class(under, spec.object_classes);
        p.shape = static_cast<ShapeKind>(shape_pick);
        p.color = {0.90 + shade, 0.10 + shade, 0.90 + shade};
      } else {
        p.box.label = random_cls;
        p.shape = static_cast<ShapeKind>((random_cls - 1) % 4);
        p.color = object_color(random_cls);
      }
      placed.push_back(p);
      break;
    }
  }
  // Dropped placements must not push the small share below the bound.
  auto small_count = [&] {
    return static_cast<int>(std::count_if(placed.begin(), placed.end(), [](const Placed& p) { return p.small; }));
  };
  while (!placed.empty() && small_count() < spec.small_fraction * static_cast<double>(placed.size()) - 1e-12) {
    auto it = std::find_if(placed.rbegin(), placed.rend(), [](const Placed& p) { return !p.small; });
    if (it == placed.rend()) break;
    placed.erase(std::next(it).base());
  }

  std::vector<int> labels = stuff_map;
  for (const Placed& p : placed) {
    const int x0 = static_cast<int>(p.box.x0), y0 = static_cast<int>(p.box.y0);
    const int w = static_cast<int>(p.box.width()), h = static_cast<int>(p.box.height());
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        const double u = ((x - x0) + 0.5) / w * 2.0 - 1.0, v = ((y - y0) + 0.5) / h * 2.0 - 1.0;
        if (spec.regime == 30) labels[static_cast<size_t>(y) * n + x] = 10 + p.box.label - 1;
        if (!shape_covers(p.shape, u, v)) continue;
        for (int ch = 0; ch < 3; ++ch)
          s.image[(static_cast<size_t>(ch) * n + y) * n + x] = p.color[static_cast<size_t>(ch)];
      }
    s.gt_boxes.push_back(p.box);
    s.context_driven.push_back(p.context);
  }

  for (double& v : s.image.data()) v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
  if (spec.with_seg) s.seg_labels = std::move(labels);
  return s;
}

// ---------------------------------------------------------------------------
// File formats: binary P6/P5 rasters and per-image box text files.

struct GrayImage {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;
};

struct RgbImage {
  int width = 0, height = 0;
  std::vector<uint8_t> pixels;  // interleaved RGB
};

namespace detail {

inline std::vector<uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_bytes(const std::filesystem::path& p, const std::string& header, std::span<const uint8_t> body) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw DataError("write failed for " + p.string());
}

// Parses "Px W H 255" header; returns the offset of the first payload byte.
inline size_t parse_pnm_header(const std::vector<uint8_t>& b, const std::string& magic, const std::string& name,
                               int& w, int& h) {
  size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(b[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&]() -> std::string {
    skip_ws();
    std::string t;
    while (pos < b.size() && !std::isspace(b[pos])) t += static_cast<char>(b[pos++]);
    return t;
  };
  auto number = [&](const char* what) {
    const size_t at = pos;
    const std::string t = token();
    int v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size() || v <= 0)
      throw DataError(name + ": byte " + std::to_string(at) + ": bad " + what + " '" + t + "'");
    return v;
  };
  if (token() != magic) throw DataError(name + ": byte 0: expected magic " + magic);
  w = number("width");
  h = number("height");
  if (number("maxval") != 255) throw DataError(name + ": only maxval 255 is supported");
  if (pos >= b.size() || !std::isspace(b[pos])) throw DataError(name + ": byte " + std::to_string(pos) + ": missing header terminator");
  return pos + 1;
}

}  // namespace detail

inline void write_pgm(const std::filesystem::path& p, const GrayImage& img) {
  detail::write_bytes(p, "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n",
                      img.pixels);
}

inline GrayImage read_pgm(const std::filesystem::path& p) {
  const auto bytes = detail::read_bytes(p);
  GrayImage img;
  const size_t off = detail::parse_pnm_header(bytes, "P5", p.string(), img.width, img.height);
  const size_t need = static_cast<size_t>(img.width) * img.height;
  if (bytes.size() - off < need)
    throw DataError(p.string() + ": byte " + std::to_string(bytes.size()) + ": truncated payload, expected " +
                    std::to_string(need) + " bytes");
  img.pixels.assign(bytes.begin() + static_cast<long>(off), bytes.begin() + static_cast<long>(off + need));
  return img;
}

inline void write_ppm(const std::filesystem::path& p, const RgbImage& img) {
  detail::write_bytes(p, "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n",
                      img.pixels);
}

inline RgbImage read_ppm(const std::filesystem::path& p) {
  const auto bytes = detail::read_bytes(p);
  RgbImage img;
  const size_t off = detail::parse_pnm_header(bytes, "P6", p.string(), img.width, img.height);
  const size_t need = static_cast<size_t>(img.width) * img.height * 3;
  if (bytes.size() - off < need)
    throw DataError(p.string() + ": byte " + std::to_string(bytes.size()) + ": truncated payload, expected " +
                    std::to_string(need) + " bytes");
  img.pixels.assign(bytes.begin() + static_cast<long>(off), bytes.begin() + static_cast<long>(off + need));
  return img;
}

inline uint8_t quantize_unit(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline RgbImage to_rgb(const Tensor& image) {
  RgbImage img{image.dim(2), image.dim(1), {}};
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  img.pixels.resize(plane * 3);
  for (size_t p = 0; p < plane; ++p)
    for (size_t c = 0; c < 3; ++c) img.pixels[p * 3 + c] = quantize_unit(image[c * plane + p]);
  return img;
}

inline Tensor from_rgb(const RgbImage& img) {
  Tensor t({3, img.height, img.width});
  const size_t plane = static_cast<size_t>(img.width) * img.height;
  for (size_t p = 0; p < plane; ++p)
    for (size_t c = 0; c < 3; ++c) t[c * plane + p] = img.pixels[p * 3 + c] / 255.0;
  return t;
}

// Shortest round-trip decimal, always with a fractional part ("4.0", "4.25").
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  double v = 0;
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size()) throw DataError(where + ": bad number '" + tok + "'");
  return v;
}

inline std::string format_box_line(const Box& b) {
  return std::to_string(b.label) + " " + format_number(b.x0) + " " + format_number(b.y0) + " " +
         format_number(b.x1) + " " + format_number(b.y1);
}

/// Parses one annotation line "class x0 y0 x1 y1".
inline Box parse_box_line(const std::string& line, const std::string& where) {
  std::istringstream is(line);
  std::vector<std::string> f;
  for (std::string t; is >> t;) f.push_back(t);
  if (f.size() != 5) throw DataError(where + ": expected 5 fields 'class x0 y0 x1 y1', got " + std::to_string(f.size()));
  int cls = 0;
  auto [p, ec] = std::from_chars(f[0].data(), f[0].data() + f[0].size(), cls);
  if (ec != std::errc() || p != f[0].data() + f[0].size() || cls < 0)
    throw DataError(where + ": bad class id '" + f[0] + "'");
  Box b = make_box(parse_double(f[1], where), parse_double(f[2], where), parse_double(f[3], where),
                   parse_double(f[4], where), cls);
  if (!b.valid()) throw DataError(where + ": degenerate box");
  return b;
}

inline std::string sample_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

inline GrayImage labels_to_gray(std::span<const int> labels, int width, int height) {
  GrayImage g{width, height, std::vector<uint8_t>(labels.size())};
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] > 255) throw DataError("label value out of 8-bit range");
    g.pixels[i] = static_cast<uint8_t>(labels[i]);
  }
  return g;
}

struct Dataset {
  std::vector<std::string> vocab;          // segmentation classes, index order
  std::vector<std::string> object_names;   // detection classes, index 0 = background
  std::vector<SceneSample> samples;

  bool has_seg() const {
    return !samples.empty() && std::all_of(samples.begin(), samples.end(), [](const SceneSample& s) { return s.has_seg(); });
  }
};

inline std::vector<std::string> seg_vocabulary(const SceneGenSpec& spec) {
  std::vector<std::string> v = canonical_stuff_classes();
  if (spec.regime == 30) {
    const auto obj = object_class_names(spec.object_classes);
    v.insert(v.end(), obj.begin() + 1, obj.end());
  }
  return v;
}

inline Dataset generate_dataset(const SceneGenSpec& spec) {
  spec.validate();
  Dataset d{seg_vocabulary(spec), object_class_names(spec.object_classes), {}};
  d.samples.reserve(static_cast<size_t>(spec.num_images));
  for (int i = 0; i < spec.num_images; ++i) d.samples.push_back(generate_scene(spec, i));
  return d;
}

inline void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw DataError("write failed for " + p.string());
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(l);
  }
  return lines;
}

/// Layout: images/NNNNNN.ppm, seg/NNNNNN.pgm (when labelled), boxes/NNNNNN.txt,
/// manifest.txt, vocab.txt, objects.txt.
inline void write_dataset(const Dataset& d, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "boxes", ec);
  if (ec) throw DataError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  const bool seg = d.has_seg();
  if (seg) fs::create_directories(dir / "seg");
  std::vector<std::string> manifest;
  for (const SceneSample& s : d.samples) {
    const std::string name = sample_name(s.id);
    manifest.push_back(name);
    write_ppm(dir / "images" / (name + ".ppm"), to_rgb(s.image));
    std::vector<std::string> lines;
    for (const Box& b : s.gt_boxes) lines.push_back(format_box_line(b));
    write_lines(dir / "boxes" / (name + ".txt"), lines);
    if (seg) write_pgm(dir / "seg" / (name + ".pgm"), labels_to_gray(s.seg_labels, s.width, s.height));
  }
  write_lines(dir / "manifest.txt", manifest);
  write_lines(dir / "vocab.txt", d.vocab);
  write_lines(dir / "objects.txt", d.object_names);
}

inline std::vector<int> read_label_map(const std::filesystem::path& p, int width, int height) {
  GrayImage g = read_pgm(p);
  if (g.width != width || g.height != height)
    throw DataError(p.string() + ": label map size " + std::to_string(g.width) + "x" + std::to_string(g.height) +
                    " does not match image");
  return std::vector<int>(g.pixels.begin(), g.pixels.end());
}

/// Reads a dataset directory. A missing manifest means an empty dataset.
inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset d;
  if (!fs::exists(dir / "manifest.txt")) return d;
  if (fs::exists(dir / "vocab.txt")) d.vocab = read_lines(dir / "vocab.txt");
  if (fs::exists(dir / "objects.txt")) d.object_names = read_lines(dir / "objects.txt");
  const bool seg = fs::exists(dir / "seg");
  const auto manifest = read_lines(dir / "manifest.txt");
  for (size_t li = 0; li < manifest.size(); ++li) {
    const std::string& name = manifest[li];
    if (name.empty()) continue;
    SceneSample s;
    auto [p, ec] = std::from_chars(name.data(), name.data() + name.size(), s.id);
    if (ec != std::errc() || p != name.data() + name.size())
      throw DataError((dir / "manifest.txt").string() + ":" + std::to_string(li + 1) + ": bad id '" + name + "'");
    RgbImage rgb = read_ppm(dir / "images" / (name + ".ppm"));
    s.width = rgb.width;
    s.height = rgb.height;
    s.image = from_rgb(rgb);
    const auto box_path = dir / "boxes" / (name + ".txt");
    const auto lines = read_lines(box_path);
    for (size_t k = 0; k < lines.size(); ++k) {
      if (lines[k].find_first_not_of(" \t") == std::string::npos) continue;
      Box b = parse_box_line(lines[k], box_path.string() + ":" + std::to_string(k + 1));
      if (b.x0 < 0 || b.y0 < 0 || b.x1 > s.width || b.y1 > s.height)
        throw DataError(box_path.string() + ":" + std::to_string(k + 1) + ": box outside the image");
      s.gt_boxes.push_back(b);
    }
    if (seg) s.seg_labels = read_label_map(dir / "seg" / (name + ".pgm"), s.width, s.height);
    d.samples.push_back(std::move(s));
  }
  return d;
}

}  // namespace stuffnet
