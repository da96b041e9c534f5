#pragma once

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "stuffnet/data.hpp"
#include "stuffnet/model.hpp"
#include "stuffnet/train.hpp"

namespace stuffnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  std::string data;        // dataset directory
  std::string checkpoint;  // checkpoint to read (eval/infer/render/hallucinate) or write (train)
  std::string init;        // optional checkpoint to start training from
  std::string log;         // loss log written by train
  std::string out;         // output directory or file for infer/render
};

struct RunConfig {
  SceneGenSpec data;
  ModelSpec model;
  TrainConfig train = TrainConfig::desk();
  InferenceConfig infer;
  RunPaths paths;
  double render_threshold = 0.5;
  double eval_iou = 0.5;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_scalar(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": cannot parse '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline std::map<std::string, Setter> config_schema() {
  auto i32 = [](auto field) {
    return Setter([field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_scalar<int>(k, v); });
  };
  auto f64 = [](auto field) {
    return Setter(
        [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_scalar<double>(k, v); });
  };
  auto u64 = [](auto field) {
    return Setter(
        [field](RunConfig& c, const std::string& k, const std::string& v) { field(c) = parse_scalar<uint64_t>(k, v); });
  };
  auto text = [](auto field) {
    return Setter([field](RunConfig& c, const std::string&, const std::string& v) { field(c) = v; });
  };
  auto spec_key = [](const std::string& name) {
    return Setter([name](RunConfig& c, const std::string& k, const std::string& v) {
      try {
        c.model.set(name, v);
      } catch (const InvalidArgument& e) {
        throw ConfigError(k + ": " + e.what());
      }
    });
  };
  std::map<std::string, Setter> s;
  s["data.image_size"] = i32([](RunConfig& c) -> int& { return c.data.image_size; });
  s["data.num_images"] = i32([](RunConfig& c) -> int& { return c.data.num_images; });
  s["data.rho"] = f64([](RunConfig& c) -> double& { return c.data.rho; });
  s["data.object_classes"] = i32([](RunConfig& c) -> int& { return c.data.object_classes; });
  s["data.regime"] = i32([](RunConfig& c) -> int& { return c.data.regime; });
  s["data.min_objects"] = i32([](RunConfig& c) -> int& { return c.data.min_objects; });
  s["data.max_objects"] = i32([](RunConfig& c) -> int& { return c.data.max_objects; });
  s["data.small_min_side"] = i32([](RunConfig& c) -> int& { return c.data.small_min_side; });
  s["data.small_max_side"] = i32([](RunConfig& c) -> int& { return c.data.small_max_side; });
  s["data.large_min_side"] = i32([](RunConfig& c) -> int& { return c.data.large_min_side; });
  s["data.large_max_side"] = i32([](RunConfig& c) -> int& { return c.data.large_max_side; });
  s["data.small_fraction"] = f64([](RunConfig& c) -> double& { return c.data.small_fraction; });
  s["data.noise"] = f64([](RunConfig& c) -> double& { return c.data.noise; });
  s["data.seed"] = u64([](RunConfig& c) -> uint64_t& { return c.data.seed; });
  s["data.with_seg"] = Setter([](RunConfig& c, const std::string& k, const std::string& v) { c.data.with_seg = parse_bool(k, v); });

  s["model.variant"] = Setter([](RunConfig& c, const std::string& k, const std::string& v) {
    try {
      c.model.variant = parse_variant(v);
    } catch (const InvalidArgument& e) {
      throw ConfigError(k + ": " + e.what());
    }
  });
  for (const char* k : {"trunk_widths", "branch_width", "seg_hidden", "rpn_hidden", "fc_width", "det_subsample",
                        "seg_subsample", "roi_grid", "seg_dilation", "input_scale", "anchor_scales", "anchor_ratios",
                        "bbox_stds"})
    s[std::string("model.") + k] = spec_key(k);

  s["train.preset"] = Setter([](RunConfig& c, const std::string& k, const std::string& v) {
    if (v == "desk") c.train = TrainConfig::desk();
    else if (v == "paper") c.train = TrainConfig::paper();
    else throw ConfigError(k + ": expected desk or paper, got '" + v + "'");
  });
  s["train.iterations"] = i32([](RunConfig& c) -> int& { return c.train.iterations; });
  s["train.lr"] = f64([](RunConfig& c) -> double& { return c.train.base_lr; });
  s["train.lr_step"] = i32([](RunConfig& c) -> int& { return c.train.lr_step; });
  s["train.lr_factor"] = f64([](RunConfig& c) -> double& { return c.train.lr_factor; });
  s["train.momentum"] = f64([](RunConfig& c) -> double& { return c.train.momentum; });
  s["train.weight_decay"] = f64([](RunConfig& c) -> double& { return c.train.weight_decay; });
  s["train.seed"] = u64([](RunConfig& c) -> uint64_t& { return c.train.seed; });
  s["train.rpn_batch"] = i32([](RunConfig& c) -> int& { return c.train.rpn.batch; });
  s["train.rpn_positive_fraction"] = f64([](RunConfig& c) -> double& { return c.train.rpn.pos_fraction; });
  s["train.rpn_positive_iou"] = f64([](RunConfig& c) -> double& { return c.train.rpn.hi; });
  s["train.rpn_negative_iou"] = f64([](RunConfig& c) -> double& { return c.train.rpn.lo; });
  s["train.head_batch"] = i32([](RunConfig& c) -> int& { return c.train.head.batch; });
  s["train.head_fg_fraction"] = f64([](RunConfig& c) -> double& { return c.train.head.fg_fraction; });
  s["train.head_fg_iou"] = f64([](RunConfig& c) -> double& { return c.train.head.fg_thresh; });
  s["train.head_bg_iou_lo"] = f64([](RunConfig& c) -> double& { return c.train.head.bg_lo; });
  s["train.head_bg_iou_hi"] = f64([](RunConfig& c) -> double& { return c.train.head.bg_hi; });
  s["train.weight_rpn_cls"] = f64([](RunConfig& c) -> double& { return c.train.weights.rpn_cls; });
  s["train.weight_rpn_reg"] = f64([](RunConfig& c) -> double& { return c.train.weights.rpn_reg; });
  s["train.weight_head_cls"] = f64([](RunConfig& c) -> double& { return c.train.weights.head_cls; });
  s["train.weight_head_reg"] = f64([](RunConfig& c) -> double& { return c.train.weights.head_reg; });
  s["train.weight_seg"] = f64([](RunConfig& c) -> double& { return c.train.weights.seg; });
  s["train.clip_norm"] = f64([](RunConfig& c) -> double& { return c.train.clip_norm; });
  s["train.gt_as_proposals"] = Setter(
      [](RunConfig& c, const std::string& k, const std::string& v) { c.train.gt_as_proposals = parse_bool(k, v); });

  s["infer.score_floor"] = f64([](RunConfig& c) -> double& { return c.infer.score_floor; });
  s["infer.nms_iou"] = f64([](RunConfig& c) -> double& { return c.infer.nms_iou; });
  s["infer.max_detections"] = i32([](RunConfig& c) -> int& { return c.infer.max_detections; });
  s["infer.pre_nms_top"] = i32([](RunConfig& c) -> int& { return c.infer.proposals.pre_nms_top; });
  s["infer.post_nms_top"] = i32([](RunConfig& c) -> int& { return c.infer.proposals.post_nms_top; });
  s["infer.proposal_nms_iou"] = f64([](RunConfig& c) -> double& { return c.infer.proposals.nms_iou; });
  s["infer.render_threshold"] = f64([](RunConfig& c) -> double& { return c.render_threshold; });
  s["eval.iou"] = f64([](RunConfig& c) -> double& { return c.eval_iou; });

  s["paths.data"] = text([](RunConfig& c) -> std::string& { return c.paths.data; });
  s["paths.checkpoint"] = text([](RunConfig& c) -> std::string& { return c.paths.checkpoint; });
  s["paths.init"] = text([](RunConfig& c) -> std::string& { return c.paths.init; });
  s["paths.log"] = text([](RunConfig& c) -> std::string& { return c.paths.log; });
  s["paths.out"] = text([](RunConfig& c) -> std::string& { return c.paths.out; });
  return s;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [name, _] : detail::config_schema()) k.push_back(name);
  return k;
}

/// Parses "section.key = value" lines ('#' starts a comment). Unknown or
/// repeated keys are errors. A train.preset line applies before other train keys.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "config") {
  const auto schema = detail::config_schema();
  std::vector<std::tuple<int, std::string, std::string>> entries;
  std::map<std::string, int> seen;
  std::stringstream ss(text);
  int lineno = 0;
  for (std::string line; std::getline(ss, line);) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'section.key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (!schema.count(key)) throw ConfigError(where + "unknown key '" + key + "'");
    if (seen.count(key))
      throw ConfigError(where + "duplicate key '" + key + "' (first set on line " + std::to_string(seen[key]) + ")");
    seen[key] = lineno;
    entries.emplace_back(lineno, key, value);
  }
  RunConfig cfg;
  std::stable_partition(entries.begin(), entries.end(), [](const auto& e) { return std::get<1>(e) == "train.preset"; });
  for (const auto& [ln, key, value] : entries) {
    try {
      schema.at(key)(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(ln) + ": " + e.what());
    }
  }
  try {
    cfg.data.validate();
    cfg.train.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

}  // namespace stuffnet
