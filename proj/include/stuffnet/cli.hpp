#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>

#include "stuffnet/checkpoint.hpp"
#include "stuffnet/config.hpp"
#include "stuffnet/data.hpp"
#include "stuffnet/evalkit.hpp"
#include "stuffnet/model.hpp"
#include "stuffnet/train.hpp"

namespace stuffnet {

enum ExitCode : int { kExitOk = 0, kExitConfig = 2, kExitIo = 3, kExitMismatch = 4 };

// Raised for unusable command-line input that CLI11 itself cannot detect.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Capability or label mismatch between a model and its inputs (exit 4).
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Overlay rendering.

inline std::array<uint8_t, 3> palette_color(int k) {
  static const std::array<std::array<uint8_t, 3>, 20> table{{
      {0, 0, 0},       {128, 0, 0},     {0, 128, 0},     {128, 128, 0},   {0, 0, 128},
      {128, 0, 128},   {0, 128, 128},   {128, 128, 128}, {64, 0, 0},      {192, 0, 0},
      {64, 128, 0},    {192, 128, 0},   {64, 0, 128},    {192, 0, 128},   {64, 128, 128},
      {192, 128, 128}, {0, 64, 0},      {128, 64, 0},    {0, 192, 0},     {128, 192, 0},
  }};
  if (k >= 0 && k < static_cast<int>(table.size())) return table[static_cast<size_t>(k)];
  const uint64_t h = Rng(static_cast<uint64_t>(k))();
  return {static_cast<uint8_t>(h), static_cast<uint8_t>(h >> 8), static_cast<uint8_t>(h >> 16)};
}

inline std::array<uint8_t, 3> box_color(int cls) {
  static const std::array<std::array<uint8_t, 3>, 8> table{{
      {255, 255, 255}, {255, 0, 0}, {0, 255, 0}, {0, 128, 255}, {255, 255, 0}, {255, 0, 255}, {0, 255, 255}, {255, 128, 0},
  }};
  return table[static_cast<size_t>(cls) % table.size()];
}

// Integer pixel extent [x0, x1) of a box border: coordinates rounded to the nearest pixel edge.
struct PixelRect {
  int x0, y0, x1, y1;
};

inline PixelRect box_pixels(const Box& b, int w, int h) {
  auto r = [](double v, int hi) { return std::clamp(static_cast<int>(std::lround(v)), 0, hi); };
  return {r(b.x0, w), r(b.y0, h), r(b.x1, w), r(b.y1, h)};
}

/// Image blended 50/50 with the class palette where a label map is given, then
/// 2-px borders (drawn inward) for detections scoring at least `threshold`.
inline RgbImage render_overlay(const Tensor& image, const std::vector<int>* seg, std::span<const Box> dets,
                               double threshold) {
  RgbImage out = to_rgb(image);
  const int w = out.width, h = out.height;
  if (seg) {
    if (seg->size() != static_cast<size_t>(w) * static_cast<size_t>(h))
      throw InvalidArgument("render_overlay: label map does not match the image");
    for (size_t p = 0; p < seg->size(); ++p) {
      const auto c = palette_color((*seg)[p]);
      for (size_t ch = 0; ch < 3; ++ch) {
        uint8_t& v = out.pixels[3 * p + ch];
        v = static_cast<uint8_t>((static_cast<int>(v) + static_cast<int>(c[ch]) + 1) / 2);
      }
    }
  }
  std::vector<int> order = order_by_score(dets);
  std::reverse(order.begin(), order.end());  // highest score drawn last, on top
  for (int i : order) {
    const Box& b = dets[static_cast<size_t>(i)];
    if (b.score < threshold) continue;
    const PixelRect r = box_pixels(b, w, h);
    const auto c = box_color(b.label);
    auto put = [&](int x, int y) {
      if (x < r.x0 || x >= r.x1 || y < r.y0 || y >= r.y1) return;
      const size_t p = static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x);
      for (size_t ch = 0; ch < 3; ++ch) out.pixels[3 * p + ch] = c[ch];
    };
    for (int t = 0; t < 2; ++t) {
      for (int x = r.x0; x < r.x1; ++x) {
        put(x, r.y0 + t);
        put(x, r.y1 - 1 - t);
      }
      for (int y = r.y0; y < r.y1; ++y) {
        put(r.x0 + t, y);
        put(r.x1 - 1 - t, y);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Command helpers.

inline std::string format_detection_line(int image_id, const Box& b) {
  return std::to_string(image_id) + " " + std::to_string(b.label) + " " + format_number(b.score) + " " +
         format_number(b.x0) + " " + format_number(b.y0) + " " + format_number(b.x1) + " " + format_number(b.y1);
}

inline std::vector<Detection> read_detections(const std::filesystem::path& p) {
  const auto lines = read_lines(p);
  std::vector<Detection> out;
  for (size_t i = 0; i < lines.size(); ++i) {
    std::istringstream is(lines[i]);
    std::vector<std::string> f;
    for (std::string t; is >> t;) f.push_back(t);
    if (f.empty()) continue;
    const std::string where = p.string() + ":" + std::to_string(i + 1);
    if (f.size() != 7) throw DataError(where + ": expected 'image_id class score x0 y0 x1 y1'");
    Detection d;
    d.image_id = static_cast<int>(parse_double(f[0], where));
    d.box = make_box(parse_double(f[3], where), parse_double(f[4], where), parse_double(f[5], where),
                     parse_double(f[6], where), static_cast<int>(parse_double(f[1], where)), parse_double(f[2], where));
    out.push_back(d);
  }
  return out;
}

inline LabelMaps read_label_dir(const std::filesystem::path& dir, const Dataset& data) {
  if (!std::filesystem::is_directory(dir)) throw DataError("no label directory " + dir.string());
  LabelMaps out;
  for (const SceneSample& s : data.samples)
    out[s.id] = read_label_map(dir / (sample_name(s.id) + ".pgm"), s.width, s.height);
  return out;
}

// Fits the class counts of a spec to a dataset's vocabulary files.
inline void fit_classes(ModelSpec& spec, const Dataset& data) {
  if (!data.vocab.empty()) spec.seg_classes = static_cast<int>(data.vocab.size());
  if (!data.object_names.empty()) {
    spec.object_classes = static_cast<int>(data.object_names.size());
  } else {
    int top = 0;
    for (const auto& s : data.samples)
      for (const Box& b : s.gt_boxes) top = std::max(top, b.label);
    spec.object_classes = top + 1;
  }
}

inline void check_compatible(const ModelSpec& spec, const Dataset& data) {
  if (!data.object_names.empty() && static_cast<int>(data.object_names.size()) != spec.object_classes)
    throw CapabilityError("dataset has " + std::to_string(data.object_names.size()) + " object classes, model has " +
                          std::to_string(spec.object_classes));
  for (const auto& s : data.samples)
    for (const Box& b : s.gt_boxes)
      if (b.label < 1 || b.label >= spec.object_classes)
        throw CapabilityError("image " + std::to_string(s.id) + " has object class " + std::to_string(b.label) +
                              " outside the model's range");
  if (spec.has_seg() && !data.vocab.empty() && static_cast<int>(data.vocab.size()) != spec.seg_classes)
    throw CapabilityError("dataset vocabulary has " + std::to_string(data.vocab.size()) + " classes, model has " +
                          std::to_string(spec.seg_classes));
}

inline Dataset load_dataset(const std::string& dir) {
  if (dir.empty()) throw UsageError("no dataset directory given (--data or paths.data)");
  if (!std::filesystem::exists(std::filesystem::path(dir) / "manifest.txt"))
    throw DataError("no dataset at " + dir + " (manifest.txt missing)");
  return read_dataset(dir);
}

inline Model load_model(const std::string& path) {
  if (path.empty()) throw UsageError("no checkpoint given (--checkpoint or paths.checkpoint)");
  return load_checkpoint(path);
}

inline std::string summarize_dataset(const Dataset& d) {
  const SizeBins bins = SizeBins::for_image_size(d.samples.empty() ? 64 : d.samples.front().width);
  int counts[3] = {0, 0, 0};
  std::vector<int> per_class(std::max<size_t>(d.object_names.size(), 1), 0);
  size_t objects = 0;
  for (const auto& s : d.samples)
    for (const Box& b : s.gt_boxes) {
      ++objects;
      counts[static_cast<int>(bins.classify(b.area())) - 1]++;
      if (b.label >= static_cast<int>(per_class.size())) per_class.resize(static_cast<size_t>(b.label) + 1, 0);
      per_class[static_cast<size_t>(b.label)]++;
    }
  std::ostringstream os;
  os << "images=" << d.samples.size() << " objects=" << objects << " small=" << counts[0] << " medium=" << counts[1]
     << " large=" << counts[2];
  for (size_t c = 1; c < per_class.size(); ++c)
    os << ' ' << (c < d.object_names.size() ? d.object_names[c] : "class" + std::to_string(c)) << '=' << per_class[c];
  return os.str();
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline void print_eval(std::ostream& out, const EvalReport& rep, const std::vector<std::string>& names) {
  auto name = [&](size_t c) { return c < names.size() ? names[c] : "class" + std::to_string(c); };
  out << "size_bin " << size_bin_name(rep.bin) << '\n';
  out << std::left << std::setw(14) << "class" << std::right << std::setw(8) << "AP" << std::setw(7) << "gt"
      << std::setw(7) << "tp" << '\n';
  for (size_t c = 1; c < rep.ap.size(); ++c)
    out << std::left << std::setw(14) << name(c) << std::right << std::setw(8) << fixed4(rep.ap[c]) << std::setw(7)
        << rep.num_gt[c] << std::setw(7) << rep.num_tp[c] << '\n';
  out << std::left << std::setw(14) << "mAP" << std::right << std::setw(8) << fixed4(rep.map) << '\n';
  if (rep.empty)
    out << "warning: no ground-truth objects in size bin '" << size_bin_name(rep.bin) << "'; mAP reported as 0\n";
  const std::string bin = size_bin_name(rep.bin);
  for (size_t c = 1; c < rep.ap.size(); ++c) out << "ap." << bin << '.' << name(c) << '=' << fixed4(rep.ap[c]) << '\n';
  out << "map." << bin << '=' << fixed4(rep.map) << '\n';
}

// ---------------------------------------------------------------------------
// Commands.

struct CliOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string deterministic = "on";
  std::string data, checkpoint, out, log, init, hallucinated, detections_file, seg_out;
  std::string size_bin = "all";
  std::optional<int> count;
  std::vector<int> ids;
  std::optional<double> threshold;
};

inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw DataError("cannot open config " + o.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = parse_run_config(ss.str(), o.config_path);
  }
  if (o.seed) cfg.data.seed = cfg.train.seed = *o.seed;
  if (o.count) cfg.data.num_images = *o.count;
  if (o.threshold) cfg.render_threshold = *o.threshold;
  auto pick = [](const std::string& flag, std::string& field) {
    if (!flag.empty()) field = flag;
  };
  pick(o.data, cfg.paths.data);
  pick(o.checkpoint, cfg.paths.checkpoint);
  pick(o.out, cfg.paths.out);
  pick(o.log, cfg.paths.log);
  pick(o.init, cfg.paths.init);
  try {
    cfg.data.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  const std::string dir = !cfg.paths.out.empty() ? cfg.paths.out : cfg.paths.data;
  if (dir.empty()) throw UsageError("gen-data needs --out (or paths.data)");
  const Dataset d = generate_dataset(cfg.data);
  write_dataset(d, dir);
  out << "wrote " << dir << ": " << summarize_dataset(d) << '\n';
  return kExitOk;
}

inline int cmd_train(const RunConfig& cfg, const CliOptions& o, std::ostream& out) {
  if (cfg.paths.checkpoint.empty() && cfg.paths.out.empty()) throw UsageError("train needs --out (checkpoint path)");
  const std::string ck_path = !cfg.paths.out.empty() ? cfg.paths.out : cfg.paths.checkpoint;
  const Dataset data = load_dataset(cfg.paths.data);
  ModelSpec spec = cfg.model;
  fit_classes(spec, data);
  try {
    spec.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  check_compatible(spec, data);
  Model model = cfg.paths.init.empty() ? build(spec, cfg.train.seed) : load_checkpoint(cfg.paths.init, spec);

  std::ofstream log;
  if (!cfg.paths.log.empty()) {
    log.open(cfg.paths.log, std::ios::trunc);
    if (!log) throw DataError("cannot write " + cfg.paths.log);
  }
  const LossCallback on_step = [&](const LossRecord& r) {
    if (log) log << format_loss_line(r) << '\n';
  };
  std::vector<LossRecord> history;
  if (!o.hallucinated.empty()) {
    if (!spec.has_seg())
      throw CapabilityError("--hallucinated-labels needs a multitask or fused model, got baseline");
    const LabelMaps labels = read_label_dir(o.hallucinated, data);
    for (const auto& [id, m] : labels)
      for (int v : m)
        if (v >= spec.seg_classes)
          throw CapabilityError("hallucinated label " + std::to_string(v) + " in image " + std::to_string(id) +
                                " exceeds the model's " + std::to_string(spec.seg_classes) + " classes");
    history = train_constrained(model, data, labels, cfg.train, on_step);
  } else {
    history = train(model, data, cfg.train, on_step);
  }
  if (log) {
    log.flush();
    if (!log) throw DataError("write failed for " + cfg.paths.log);
  }
  save_checkpoint(model, ck_path);
  const auto smooth = smoothed_totals(history);
  out << "final smoothed loss " << format_number(smooth.empty() ? 0.0 : smooth.back()) << '\n';
  return kExitOk;
}

inline int cmd_hallucinate(const RunConfig& cfg, std::ostream& out) {
  const Model model = load_model(cfg.paths.checkpoint);
  if (!model.spec().has_seg())
    throw CapabilityError(std::string("cannot hallucinate labels with a ") + variant_name(model.spec().variant) +
                          " checkpoint");
  const Dataset data = load_dataset(cfg.paths.data);
  const std::filesystem::path dir =
      !cfg.paths.out.empty() ? std::filesystem::path(cfg.paths.out) : std::filesystem::path(cfg.paths.data) / "seg_hallucinated";
  std::filesystem::create_directories(dir);
  for (const SceneSample& s : data.samples)
    write_pgm(dir / (sample_name(s.id) + ".pgm"), labels_to_gray(segment(model, s.image), s.width, s.height));
  out << "wrote " << data.samples.size() << " label maps to " << dir.string() << '\n';
  return kExitOk;
}

inline int cmd_eval(const RunConfig& cfg, const CliOptions& o, std::ostream& out) {
  const Dataset data = load_dataset(cfg.paths.data);
  const SizeBin bin = parse_size_bin(o.size_bin);
  std::vector<Detection> dets;
  std::vector<std::string> names = data.object_names;
  int num_classes = static_cast<int>(names.size());
  std::optional<Model> model;
  if (!o.detections_file.empty()) {
    dets = read_detections(o.detections_file);
    if (num_classes == 0) {
      ModelSpec s;
      fit_classes(s, data);
      num_classes = s.object_classes;
    }
  } else {
    model = load_model(cfg.paths.checkpoint);
    check_compatible(model->spec(), data);
    num_classes = model->spec().object_classes;
    for (const SceneSample& s : data.samples)
      for (const Box& b : run_inference(*model, s.image, cfg.infer).detections) dets.push_back({s.id, b});
  }
  std::map<int, std::vector<Box>> gts;
  for (const SceneSample& s : data.samples) gts[s.id] = s.gt_boxes;
  const SizeBins bins = SizeBins::for_image_size(data.samples.empty() ? 64 : data.samples.front().width);
  print_eval(out, evaluate_map(dets, gts, num_classes, bin, bins, cfg.eval_iou), names);
  if (model && model->spec().has_seg() && data.has_seg()) {
    std::vector<int> pred, gt;
    for (const SceneSample& s : data.samples) {
      const auto p = segment(*model, s.image);
      pred.insert(pred.end(), p.begin(), p.end());
      gt.insert(gt.end(), s.seg_labels.begin(), s.seg_labels.end());
    }
    const SegReport sr = seg_metrics(pred, gt, model->spec().seg_classes);
    out << "seg.mean_iou=" << fixed4(sr.mean_iou) << '\n' << "seg.pixel_accuracy=" << fixed4(sr.pixel_accuracy) << '\n';
  }
  return kExitOk;
}

inline int cmd_infer(const RunConfig& cfg, const CliOptions& o, std::ostream& out) {
  const Model model = load_model(cfg.paths.checkpoint);
  const Dataset data = load_dataset(cfg.paths.data);
  check_compatible(model.spec(), data);
  std::vector<std::string> lines;
  if (!o.seg_out.empty()) {
    if (!model.spec().has_seg()) throw CapabilityError("--seg-out needs a model with a segmentation stage");
    std::filesystem::create_directories(o.seg_out);
  }
  for (const SceneSample& s : data.samples) {
    const InferenceResult r = run_inference(model, s.image, cfg.infer);
    for (const Box& b : r.detections) lines.push_back(format_detection_line(s.id, b));
    if (!o.seg_out.empty())
      write_pgm(std::filesystem::path(o.seg_out) / (sample_name(s.id) + ".pgm"),
                labels_to_gray(r.seg_labels, s.width, s.height));
  }
  if (cfg.paths.out.empty()) {
    for (const auto& l : lines) out << l << '\n';
  } else {
    write_lines(cfg.paths.out, lines);
    out << "wrote " << lines.size() << " detections to " << cfg.paths.out << '\n';
  }
  return kExitOk;
}

inline int cmd_render(const RunConfig& cfg, const CliOptions& o, std::ostream& out) {
  if (cfg.paths.out.empty()) throw UsageError("render needs --out (output directory)");
  const Model model = load_model(cfg.paths.checkpoint);
  const Dataset data = load_dataset(cfg.paths.data);
  check_compatible(model.spec(), data);
  std::vector<const SceneSample*> chosen;
  if (o.ids.empty()) {
    for (const auto& s : data.samples) chosen.push_back(&s);
  } else {
    for (int id : o.ids) {
      auto it = std::find_if(data.samples.begin(), data.samples.end(), [&](const SceneSample& s) { return s.id == id; });
      if (it == data.samples.end()) throw DataError("image id " + std::to_string(id) + " not in " + cfg.paths.data);
      chosen.push_back(&*it);
    }
  }
  std::filesystem::create_directories(cfg.paths.out);
  for (const SceneSample* s : chosen) {
    const InferenceResult r = run_inference(model, s->image, cfg.infer);
    const RgbImage img =
        render_overlay(s->image, r.seg_labels.empty() ? nullptr : &r.seg_labels, r.detections, cfg.render_threshold);
    write_ppm(std::filesystem::path(cfg.paths.out) / (sample_name(s->id) + ".ppm"), img);
  }
  out << "rendered " << chosen.size() << " images to " << cfg.paths.out << '\n';
  return kExitOk;
}

/// Entry point shared by the binary and the tests. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"stuffnet: joint stuff segmentation and object detection"};
  app.require_subcommand(1, 1);
  CliOptions o;
  app.add_option("--config", o.config_path, "config file of 'section.key = value' lines");
  app.add_option("--seed", o.seed, "overrides data.seed and train.seed");
  app.add_option("--deterministic", o.deterministic, "bit-deterministic execution")
      ->check(CLI::IsMember({"on", "off"}));

  auto data_opt = [&](CLI::App* c) { c->add_option("--data", o.data, "dataset directory"); };
  auto ck_opt = [&](CLI::App* c) { c->add_option("--checkpoint", o.checkpoint, "checkpoint file"); };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--out", o.out, "dataset directory to write");
  gen->add_option("--count", o.count, "number of images (overrides data.num_images)");

  CLI::App* tr = app.add_subcommand("train", "train a model");
  data_opt(tr);
  tr->add_option("--out", o.out, "checkpoint to write");
  tr->add_option("--log", o.log, "loss log to write");
  tr->add_option("--init", o.init, "checkpoint to start from");
  tr->add_option("--hallucinated-labels", o.hallucinated, "directory of label maps replacing stuff ground truth");

  CLI::App* hal = app.add_subcommand("hallucinate", "write per-pixel argmax label maps for a dataset");
  ck_opt(hal);
  data_opt(hal);
  hal->add_option("--out", o.out, "output directory (default <data>/seg_hallucinated)");

  CLI::App* ev = app.add_subcommand("eval", "evaluate detections (and segmentation) on a dataset");
  ck_opt(ev);
  data_opt(ev);
  ev->add_option("--size-bin", o.size_bin, "all, small, medium or large")
      ->check(CLI::IsMember({"all", "small", "medium", "large"}));
  ev->add_option("--detections-file", o.detections_file, "score these detections instead of running a model");

  CLI::App* inf = app.add_subcommand("infer", "run detection and segmentation");
  ck_opt(inf);
  data_opt(inf);
  inf->add_option("--out", o.out, "detection dump file (default stdout)");
  inf->add_option("--seg-out", o.seg_out, "directory for predicted label maps");

  CLI::App* ren = app.add_subcommand("render", "draw detections and segmentation over images");
  ck_opt(ren);
  data_opt(ren);
  ren->add_option("--out", o.out, "output directory");
  ren->add_option("--ids", o.ids, "image ids (default all)")->delimiter(',');
  ren->add_option("--threshold", o.threshold, "minimum score for drawn boxes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const RunConfig cfg = resolve_config(o);
    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (tr->parsed()) return cmd_train(cfg, o, out);
    if (hal->parsed()) return cmd_hallucinate(cfg, out);
    if (ev->parsed()) return cmd_eval(cfg, o, out);
    if (inf->parsed()) return cmd_infer(cfg, o, out);
    if (ren->parsed()) return cmd_render(cfg, o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingLabels& e) {
    err << "label mismatch: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const SpecMismatch& e) {
    err << "spec mismatch: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const CapabilityError& e) {
    err << "capability mismatch: " << e.what() << '\n';
    return kExitMismatch;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitIo;
  } catch (const DataError& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::ios_base::failure& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << '\n';
    return kExitIo;
  } catch (const InvalidArgument& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace stuffnet
