#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stuffnet/boxgeom.hpp"
#include "stuffnet/data.hpp"
#include "stuffnet/layers.hpp"

namespace stuffnet {

enum class Variant { baseline, multitask, fused };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::multitask: return "multitask";
    case Variant::fused: return "fused";
  }
  return "baseline";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "baseline") return Variant::baseline;
  if (s == "multitask") return Variant::multitask;
  if (s == "fused") return Variant::fused;
  throw InvalidArgument("unknown variant '" + s + "' (expected baseline, multitask or fused)");
}

namespace detail {

inline std::string join_numbers(const std::vector<double>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v[i]);
    s += (i ? "," : "") + std::string(buf, r.ptr);
  }
  return s;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<double> split_numbers(const std::string& s, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok.erase(0, tok.find_first_not_of(" \t"));
    tok.erase(tok.find_last_not_of(" \t") + 1);
    double v = 0;
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (tok.empty() || ec != std::errc() || p != tok.data() + tok.size())
      throw InvalidArgument(key + ": bad number '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw InvalidArgument(key + ": empty list");
  return out;
}

inline int parse_int(const std::string& s, const std::string& key) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw InvalidArgument(key + ": expected an integer, got '" + s + "'");
  return v;
}

}  // namespace detail

/// Network architecture. Shared trunk stages (two 3x3 convs each, 2x2/2 pool
/// between stages) end at the fork; the detection stage follows a stride-2
/// pool, the segmentation stage a size-preserving stride-1 pool.
struct ModelSpec {
  Variant variant = Variant::fused;
  std::vector<int> trunk_widths{8, 12, 16};
  int branch_width = 16;
  int seg_hidden = 32;
  int rpn_hidden = 32;
  int fc_width = 64;
  int det_subsample = 8;
  int seg_subsample = 4;
  int seg_classes = 10;
  int object_classes = 5;  // including background
  int roi_grid = 7;
  int seg_dilation = 2;
  double input_scale = 4.0;  // pixels enter as (x - 0.5) * input_scale
  std::vector<double> bbox_stds{0.1, 0.1, 0.2, 0.2};  // head regression targets are divided by these
  std::vector<double> anchor_scales{8, 16, 32};
  std::vector<double> anchor_ratios{0.5, 1, 2};

  bool has_seg() const { return variant != Variant::baseline; }
  bool fuses() const { return variant == Variant::fused; }

  AnchorGrid anchor_grid() const { return AnchorGrid{static_cast<double>(det_subsample), anchor_scales, anchor_ratios}; }
  int anchors_per_cell() const { return static_cast<int>(anchor_scales.size() * anchor_ratios.size()); }

  void validate() const {
    auto fail = [](const std::string& m) { throw InvalidArgument("model spec: " + m); };
    if (trunk_widths.empty()) fail("trunk_widths must not be empty");
    for (int w : trunk_widths)
      if (w < 1) fail("trunk widths must be positive");
    if (branch_width < 1 || seg_hidden < 1 || rpn_hidden < 1 || fc_width < 1) fail("layer widths must be positive");
    const int expected = 1 << trunk_widths.size();
    if (det_subsample != expected)
      fail("det_subsample " + std::to_string(det_subsample) + " inconsistent with " +
           std::to_string(trunk_widths.size()) + " shared stages (expected " + std::to_string(expected) + ")");
    if (det_subsample != 2 * seg_subsample) fail("det_subsample must equal 2 * seg_subsample");
    if (seg_classes < 2 || seg_classes > 256) fail("seg_classes must be in [2, 256]");
    if (object_classes < 2) fail("object_classes must include background and at least one class");
    if (roi_grid < 1) fail("roi_grid must be positive");
    if (seg_dilation < 1) fail("seg_dilation must be positive");
    if (!(input_scale > 0)) fail("input_scale must be positive");
    if (bbox_stds.size() != 4) fail("bbox_stds needs 4 values");
    for (double v : bbox_stds)
      if (!(v > 0)) fail("bbox_stds must be positive");
    if (anchor_scales.empty() || anchor_ratios.empty()) fail("anchor scales and ratios must be non-empty");
    for (double v : anchor_scales)
      if (!(v > 0)) fail("anchor scales must be positive");
    for (double v : anchor_ratios)
      if (!(v > 0)) fail("anchor ratios must be positive");
  }

  // Canonical "key=value" lines, sorted by key.
  std::string canonical_text() const {
    std::map<std::string, std::string> kv{
        {"anchor_ratios", detail::join_numbers(anchor_ratios)},
        {"anchor_scales", detail::join_numbers(anchor_scales)},
        {"bbox_stds", detail::join_numbers(bbox_stds)},
        {"branch_width", std::to_string(branch_width)},
        {"det_subsample", std::to_string(det_subsample)},
        {"fc_width", std::to_string(fc_width)},
        {"input_scale", detail::join_numbers({input_scale})},
        {"object_classes", std::to_string(object_classes)},
        {"roi_grid", std::to_string(roi_grid)},
        {"rpn_hidden", std::to_string(rpn_hidden)},
        {"seg_classes", std::to_string(seg_classes)},
        {"seg_dilation", std::to_string(seg_dilation)},
        {"seg_hidden", std::to_string(seg_hidden)},
        {"seg_subsample", std::to_string(seg_subsample)},
        {"trunk_widths", detail::join_ints(trunk_widths)},
        {"variant", variant_name(variant)},
    };
    std::string s;
    for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
    return s;
  }

  static ModelSpec parse(const std::string& text) {
    ModelSpec m;
    std::stringstream ss(text);
    for (std::string line; std::getline(ss, line);) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw InvalidArgument("model spec: malformed line '" + line + "'");
      m.set(line.substr(0, eq), line.substr(eq + 1));
    }
    m.validate();
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    auto as_int = [&] { return detail::parse_int(value, key); };
    if (key == "variant") variant = parse_variant(value);
    else if (key == "trunk_widths") {
      trunk_widths.clear();
      for (double v : detail::split_numbers(value, key)) trunk_widths.push_back(static_cast<int>(v));
    } else if (key == "branch_width") branch_width = as_int();
    else if (key == "seg_hidden") seg_hidden = as_int();
    else if (key == "rpn_hidden") rpn_hidden = as_int();
    else if (key == "fc_width") fc_width = as_int();
    else if (key == "det_subsample") det_subsample = as_int();
    else if (key == "seg_subsample") seg_subsample = as_int();
    else if (key == "seg_classes") seg_classes = as_int();
    else if (key == "object_classes") object_classes = as_int();
    else if (key == "roi_grid") roi_grid = as_int();
    else if (key == "seg_dilation") seg_dilation = as_int();
    else if (key == "bbox_stds") bbox_stds = detail::split_numbers(value, key);
    else if (key == "input_scale") input_scale = detail::split_numbers(value, key).at(0);
    else if (key == "anchor_scales") anchor_scales = detail::split_numbers(value, key);
    else if (key == "anchor_ratios") anchor_ratios = detail::split_numbers(value, key);
    else throw InvalidArgument("model spec: unknown key '" + key + "'");
  }

  bool operator==(const ModelSpec& o) const { return canonical_text() == o.canonical_text(); }
};

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Stored weights are kept exactly representable in 32 bits so checkpoint
// roundtrips are bit-exact.
inline void round_to_storage(Tensor& t) {
  for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

class Model {
 public:
  Model() = default;
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const ModelSpec& spec() const { return spec_; }

  void add_param(std::string name, Tensor t) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(t)});
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& param(const std::string& name) { return params_.at(lookup(name)).value; }
  const Tensor& param(const std::string& name) const { return params_.at(lookup(name)).value; }

  std::vector<NamedTensor>& params() { return params_; }
  const std::vector<NamedTensor>& params() const { return params_; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> n;
    for (const auto& p : params_) n.push_back(p.name);
    return n;
  }

  size_t num_weights() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.drop_grad();
  }

 private:
  size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("model has no parameter named " + name);
    return it->second;
  }

  ModelSpec spec_;
  std::vector<NamedTensor> params_;
  std::map<std::string, size_t> index_;
};

namespace detail {

// Layers followed by relu use the relu gain sqrt(2); output layers use 1.
inline constexpr double kReluGain = 1.4142135623730951;

inline void add_conv(Model& m, const std::string& name, int in, int out, int k, const Rng& root, double gain) {
  const int fan_in = in * k * k, fan_out = out * k * k;
  Tensor w = xavier_init(fan_in, fan_out, {out, in, k, k}, root.split(name + ".w")(), gain);
  round_to_storage(w);
  m.add_param(name + ".w", std::move(w));
  m.add_param(name + ".b", Tensor({out}));
}

inline void add_fc(Model& m, const std::string& name, int in, int out, const Rng& root, double gain) {
  Tensor w = xavier_init(in, out, {in, out}, root.split(name + ".w")(), gain);
  round_to_storage(w);
  m.add_param(name + ".w", std::move(w));
  m.add_param(name + ".b", Tensor({out}));
}

inline std::string stage_conv(size_t stage, int idx) {
  return "conv" + std::to_string(stage) + "_" + std::to_string(idx);
}

}  // namespace detail

/// Builds a model with Xavier-initialized weights and zero biases.
inline Model build(const ModelSpec& spec, uint64_t seed) {
  Model m(spec);
  const Rng root(seed);
  int in = 3;
  for (size_t s = 0; s < spec.trunk_widths.size(); ++s) {
    const int w = spec.trunk_widths[s];
    detail::add_conv(m, detail::stage_conv(s + 1, 1), in, w, 3, root, detail::kReluGain);
    detail::add_conv(m, detail::stage_conv(s + 1, 2), w, w, 3, root, detail::kReluGain);
    in = w;
  }
  const size_t fork = spec.trunk_widths.size() + 1;
  detail::add_conv(m, detail::stage_conv(fork, 1), in, spec.branch_width, 3, root, detail::kReluGain);
  detail::add_conv(m, detail::stage_conv(fork, 2), spec.branch_width, spec.branch_width, 3, root, detail::kReluGain);
  if (spec.has_seg()) {
    detail::add_conv(m, detail::stage_conv(fork, 1) + "_seg", in, spec.branch_width, 3, root, detail::kReluGain);
    detail::add_conv(m, detail::stage_conv(fork, 2) + "_seg", spec.branch_width, spec.branch_width, 3, root, detail::kReluGain);
    detail::add_conv(m, "fc6_seg", spec.branch_width, spec.seg_hidden, 3, root, detail::kReluGain);
    detail::add_conv(m, "fc8_seg", spec.seg_hidden, spec.seg_classes, 1, root, 1.0);
  }
  const int k = spec.anchors_per_cell();
  detail::add_conv(m, "rpn_conv", spec.branch_width, spec.rpn_hidden, 3, root, detail::kReluGain);
  detail::add_conv(m, "rpn_cls", spec.rpn_hidden, 2 * k, 1, root, 1.0);
  detail::add_conv(m, "rpn_reg", spec.rpn_hidden, 4 * k, 1, root, 1.0);
  const int pooled = spec.branch_width * spec.roi_grid * spec.roi_grid;
  detail::add_fc(m, "fc6", pooled, spec.fc_width, root, detail::kReluGain);
  detail::add_fc(m, "fc7", spec.fc_width, spec.fc_width, root, detail::kReluGain);
  detail::add_fc(m, "cls_score", spec.fc_width, spec.object_classes, root, 1.0);
  detail::add_fc(m, "bbox_pred", spec.fc_width, 4 * spec.object_classes, root, 1.0);
  return m;
}

// Binds model parameters into a graph, either as trainable leaves or as constants.
class ParamBinder {
 public:
  ParamBinder(Graph& g, Model& m) : g_(g), model_(&m), cmodel_(&m), trainable_(true) {}
  ParamBinder(Graph& g, const Model& m) : g_(g), model_(nullptr), cmodel_(&m), trainable_(false) {}

  Graph& graph() { return g_; }
  const ModelSpec& spec() const { return cmodel_->spec(); }

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Var v = trainable_ ? g_.param(model_->param(name)) : g_.param_const(cmodel_->param(name));
    bound_[name] = v;
    return v;
  }

 private:
  Graph& g_;
  Model* model_;
  const Model* cmodel_;
  bool trainable_;
  std::map<std::string, Var> bound_;
};

inline Var conv_layer(ParamBinder& p, Var x, const std::string& name, const ConvOptions& o, bool with_relu = true) {
  Var y = conv2d(p.graph(), x, p(name + ".w"), p(name + ".b"), o);
  return with_relu ? relu(p.graph(), y) : y;
}

struct Features {
  Var det_feat;    // [1, branch, H/det, W/det]
  Var seg_feat;    // [1, branch, H/seg, W/seg], invalid for baseline
  Var seg_scores;  // [1, K, H, W] upsampled, invalid for baseline
  int image_h = 0, image_w = 0;
};

inline Tensor image_batch(const Tensor& image, double input_scale) {
  if (image.rank() != 3 || image.dim(0) != 3) throw InvalidArgument("image must be [3,H,W]");
  Tensor x({1, 3, image.dim(1), image.dim(2)});
  for (size_t i = 0; i < image.size(); ++i) x[i] = (image[i] - 0.5) * input_scale;
  return x;
}

/// Shared trunk, detection stage and (when present) segmentation stage.
inline Features forward_trunk(ParamBinder& p, const Tensor& image) {
  const ModelSpec& s = p.spec();
  const int h = image.dim(1), w = image.dim(2);
  if (h % s.det_subsample != 0 || w % s.det_subsample != 0)
    throw InvalidArgument("image size " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                          std::to_string(s.det_subsample));
  Graph& g = p.graph();
  Var x = g.constant(image_batch(image, s.input_scale));
  const ConvOptions same{1, 1, 1};
  const size_t stages = s.trunk_widths.size();
  for (size_t st = 1; st <= stages; ++st) {
    x = conv_layer(p, x, detail::stage_conv(st, 1), same);
    x = conv_layer(p, x, detail::stage_conv(st, 2), same);
    if (st < stages) x = maxpool2d(g, x, PoolParams{2, 2, 0});
  }
  Features f;
  f.image_h = h;
  f.image_w = w;
  const size_t fork = stages + 1;
  Var det = maxpool2d(g, x, PoolParams{2, 2, 0});
  det = conv_layer(p, det, detail::stage_conv(fork, 1), same);
  f.det_feat = conv_layer(p, det, detail::stage_conv(fork, 2), same);
  if (s.has_seg()) {
    const ConvOptions holes{1, s.seg_dilation, s.seg_dilation};
    Var seg = maxpool2d(g, x, PoolParams{3, 1, 1});
    seg = conv_layer(p, seg, detail::stage_conv(fork, 1) + "_seg", holes);
    f.seg_feat = conv_layer(p, seg, detail::stage_conv(fork, 2) + "_seg", holes);
    Var hid = conv_layer(p, f.seg_feat, "fc6_seg", holes);
    Var scores = conv_layer(p, hid, "fc8_seg", ConvOptions{1, 0, 1}, false);
    f.seg_scores = bilinear_upsample(g, scores, s.seg_subsample);
  }
  return f;
}

struct RpnVars {
  Var cls;  // [N, 2] logits (background, object) per anchor
  Var reg;  // [N, 4] deltas per anchor
  int feat_h = 0, feat_w = 0;
};

inline RpnVars rpn_head(ParamBinder& p, Var det_feat) {
  Graph& g = p.graph();
  const int k = p.spec().anchors_per_cell();
  Var hid = conv_layer(p, det_feat, "rpn_conv", ConvOptions{1, 1, 1});
  Var cls = conv_layer(p, hid, "rpn_cls", ConvOptions{1, 0, 1}, false);
  Var reg = conv_layer(p, hid, "rpn_reg", ConvOptions{1, 0, 1}, false);
  const Tensor& ft = g.value(det_feat);
  RpnVars out;
  out.feat_h = ft.dim(2);
  out.feat_w = ft.dim(3);
  const int n = out.feat_h * out.feat_w * k;
  out.cls = reshape(g, channels_last(g, cls), {n, 2});
  out.reg = reshape(g, channels_last(g, reg), {n, 4});
  return out;
}

struct ProposalConfig {
  int pre_nms_top = 2000;
  int post_nms_top = 300;
  double nms_iou = 0.7;
  double min_size = 2.0;
  double max_log_scale = 4.135166556742356;  // ln(1000/16)
};

/// Scores anchors with the objectness softmax, decodes deltas, clips, keeps
/// the top pre_nms_top, then NMS. Returned boxes carry the objectness score.
inline std::vector<Box> make_proposals(std::span<const Box> anchors, const Tensor& cls_logits, const Tensor& deltas,
                                       int image_w, int image_h, const ProposalConfig& cfg) {
  const Tensor prob = softmax_rows(cls_logits);
  std::vector<Box> decoded;
  decoded.reserve(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) {
    RegressionTarget t{deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]};
    Box b = decode(anchors[i], t, cfg.max_log_scale);
    b.score = prob[i * 2 + 1];
    decoded.push_back(b);
  }
  std::vector<Box> clipped = clip_and_filter_proposals(decoded, image_w, image_h, cfg.min_size);
  std::vector<Box> top;
  for (int i : order_by_score(clipped)) {
    if (static_cast<int>(top.size()) >= cfg.pre_nms_top) break;
    top.push_back(clipped[static_cast<size_t>(i)]);
  }
  std::vector<Box> out;
  for (int i : nms(top, cfg.nms_iou, cfg.post_nms_top)) out.push_back(top[static_cast<size_t>(i)]);
  return out;
}

struct RpnOutput {
  Tensor scores;  // [N, 2] logits
  Tensor deltas;  // [N, 4]
  std::vector<Box> anchors;
  std::vector<Box> proposals;
};

inline RpnOutput forward_rpn(const Model& model, const Tensor& image, const ProposalConfig& cfg = {}) {
  Graph g(false);
  ParamBinder p(g, model);
  Features f = forward_trunk(p, image);
  RpnVars r = rpn_head(p, f.det_feat);
  RpnOutput out;
  out.scores = g.value(r.cls);
  out.deltas = g.value(r.reg);
  out.anchors = generate_anchors(model.spec().anchor_grid(), r.feat_h, r.feat_w);
  out.proposals = make_proposals(out.anchors, out.scores, out.deltas, f.image_w, f.image_h, cfg);
  return out;
}

/// roi-pool of the detection map plus, element-wise, roi-pool of the 2x
/// resolution segmentation map over the same image region (coordinates doubled).
/// rois are in detection-map coordinates. Output [R, C, G, G].
inline Var fuse_roi_features(Graph& g, Var det_feat, Var seg_feat, std::span<const RoiRect> rois, int grid) {
  const Tensor& d = g.value(det_feat);
  const Tensor& s = g.value(seg_feat);
  if (s.rank() != 4 || d.rank() != 4 || s.dim(2) != 2 * d.dim(2) || s.dim(3) != 2 * d.dim(3))
    throw InvalidArgument("fuse_roi_features: segmentation map must be exactly 2x the detection map, got " +
                          shape_str(s.dims()) + " vs " + shape_str(d.dims()));
  if (s.dim(1) != d.dim(1)) throw InvalidArgument("fuse_roi_features: channel mismatch");
  std::vector<RoiRect> doubled;
  doubled.reserve(rois.size());
  for (const RoiRect& r : rois) doubled.push_back({2 * r.x0, 2 * r.y0, 2 * r.x1, 2 * r.y1});
  Var pd = roi_maxpool(g, det_feat, rois, grid);
  Var ps = roi_maxpool(g, seg_feat, doubled, grid);
  return add(g, pd, ps);
}

// Single-roi form: [C, G, G].
inline Var fuse_roi_features(Graph& g, Var det_feat, Var seg_feat, const RoiRect& roi, int grid) {
  Var fused = fuse_roi_features(g, det_feat, seg_feat, std::span<const RoiRect>(&roi, 1), grid);
  const Tensor& t = g.value(fused);
  return reshape(g, fused, {t.dim(1), grid, grid});
}

struct HeadVars {
  Var cls;   // [R, C] logits
  Var bbox;  // [R, 4C]
};

inline std::vector<RoiRect> to_feature_coords(std::span<const Box> rois, double subsample) {
  std::vector<RoiRect> r;
  r.reserve(rois.size());
  for (const Box& b : rois) r.push_back({b.x0 / subsample, b.y0 / subsample, b.x1 / subsample, b.y1 / subsample});
  return r;
}

inline HeadVars detection_head(ParamBinder& p, const Features& f, std::span<const Box> rois) {
  if (rois.empty()) throw InvalidArgument("forward_heads: empty roi list");
  const ModelSpec& s = p.spec();
  Graph& g = p.graph();
  const auto mapped = to_feature_coords(rois, s.det_subsample);
  Var pooled = s.fuses() ? fuse_roi_features(g, f.det_feat, f.seg_feat, mapped, s.roi_grid)
                         : roi_maxpool(g, f.det_feat, mapped, s.roi_grid);
  const int r = static_cast<int>(rois.size());
  Var flat = reshape(g, pooled, {r, s.branch_width * s.roi_grid * s.roi_grid});
  Var h6 = relu(g, fully_connected(g, flat, p("fc6.w"), p("fc6.b")));
  Var h7 = relu(g, fully_connected(g, h6, p("fc7.w"), p("fc7.b")));
  return {fully_connected(g, h7, p("cls_score.w"), p("cls_score.b")),
          fully_connected(g, h7, p("bbox_pred.w"), p("bbox_pred.b"))};
}

struct DetectionOutput {
  Tensor class_scores;  // [R, C] logits
  Tensor box_deltas;    // [R, 4C]
  std::vector<Box> proposals;
  Tensor seg_scores;    // [K, H, W]; empty for the baseline variant
};

inline Tensor drop_batch_dim(const Tensor& t) {
  Tensor out = t;
  out.drop_grad();
  out.reshape({t.dim(1), t.dim(2), t.dim(3)});
  return out;
}

inline DetectionOutput forward_heads(const Model& model, const Tensor& image, std::span<const Box> rois) {
  Graph g(false);
  ParamBinder p(g, model);
  Features f = forward_trunk(p, image);
  HeadVars h = detection_head(p, f, rois);
  DetectionOutput out{g.value(h.cls), g.value(h.bbox), std::vector<Box>(rois.begin(), rois.end()), Tensor()};
  if (model.spec().has_seg()) out.seg_scores = drop_batch_dim(g.value(f.seg_scores));
  return out;
}

/// Per-pixel argmax over a [K, H, W] score map; ties go to the lower class.
inline std::vector<int> argmax_labels(const Tensor& scores) {
  const int k = scores.dim(0);
  const size_t plane = static_cast<size_t>(scores.dim(1)) * scores.dim(2);
  std::vector<int> out(plane, 0);
  for (size_t p = 0; p < plane; ++p) {
    double best = scores[p];
    for (int c = 1; c < k; ++c) {
      const double v = scores[static_cast<size_t>(c) * plane + p];
      if (v > best) {
        best = v;
        out[p] = c;
      }
    }
  }
  return out;
}

struct InferenceConfig {
  ProposalConfig proposals{2000, 300, 0.7, 2.0};
  double score_floor = 0.05;
  double nms_iou = 0.3;
  int max_detections = 100;
};

struct InferenceResult {
  std::vector<Box> detections;  // label = class, score = softmax probability
  std::vector<int> seg_labels;  // H*W, empty for baseline
  Tensor seg_scores;            // [K, H, W]
};

/// Softmax class scores, per-class box decoding (never for background),
/// score floor and per-class NMS.
inline std::vector<Box> postprocess_detections(const Tensor& class_scores, const Tensor& box_deltas,
                                               std::span<const Box> rois, int image_w, int image_h,
                                               const InferenceConfig& cfg,
                                               std::span<const double> stds = std::vector<double>{1, 1, 1, 1}) {
  const Tensor prob = softmax_rows(class_scores);
  const int nc = class_scores.dim(1);
  std::vector<Box> all;
  for (int c = 1; c < nc; ++c) {
    std::vector<Box> cand;
    for (size_t r = 0; r < rois.size(); ++r) {
      const double sc = prob[r * static_cast<size_t>(nc) + static_cast<size_t>(c)];
      if (sc < cfg.score_floor) continue;
      const size_t o = r * 4 * static_cast<size_t>(nc) + 4 * static_cast<size_t>(c);
      RegressionTarget t{box_deltas[o] * stds[0], box_deltas[o + 1] * stds[1], box_deltas[o + 2] * stds[2],
                         box_deltas[o + 3] * stds[3]};
      Box b = decode(rois[r], t, cfg.proposals.max_log_scale);
      b.label = c;
      b.score = sc;
      cand.push_back(b);
    }
    cand = clip_and_filter_proposals(cand, image_w, image_h, 1e-6);
    for (int i : nms(cand, cfg.nms_iou, cfg.max_detections)) all.push_back(cand[static_cast<size_t>(i)]);
  }
  std::vector<Box> out;
  for (int i : order_by_score(all)) {
    if (static_cast<int>(out.size()) >= cfg.max_detections) break;
    out.push_back(all[static_cast<size_t>(i)]);
  }
  return out;
}

inline InferenceResult run_inference(const Model& model, const Tensor& image, const InferenceConfig& cfg = {}) {
  Graph g(false);
  ParamBinder p(g, model);
  Features f = forward_trunk(p, image);
  RpnVars r = rpn_head(p, f.det_feat);
  const auto anchors = generate_anchors(model.spec().anchor_grid(), r.feat_h, r.feat_w);
  const auto proposals = make_proposals(anchors, g.value(r.cls), g.value(r.reg), f.image_w, f.image_h, cfg.proposals);
  InferenceResult out;
  if (!proposals.empty()) {
    HeadVars h = detection_head(p, f, proposals);
    out.detections = postprocess_detections(g.value(h.cls), g.value(h.bbox), proposals, f.image_w, f.image_h, cfg,
                                            model.spec().bbox_stds);
  }
  if (model.spec().has_seg()) {
    out.seg_scores = drop_batch_dim(g.value(f.seg_scores));
    out.seg_labels = argmax_labels(out.seg_scores);
  }
  return out;
}

}  // namespace stuffnet
