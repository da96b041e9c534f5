#pragma once

#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stuffnet/model.hpp"

namespace stuffnet {

class MissingLabels : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double rpn_cls = 1.0, rpn_reg = 1.0, head_cls = 1.0, head_reg = 1.0, seg = 1.0;

  void validate() const {
    if (rpn_cls < 0 || rpn_reg < 0 || head_cls < 0 || head_reg < 0 || seg < 0)
      throw InvalidArgument("loss weights must be non-negative");
  }
};

struct LossTerms {
  double rpn_cls = 0, rpn_reg = 0, head_cls = 0, head_reg = 0, seg = 0, total = 0;
};

/// Weighted sum of the five normalized loss terms.
inline double total_loss(const LossTerms& t, const LossWeights& w = {}) {
  w.validate();
  for (double v : {t.rpn_cls, t.rpn_reg, t.head_cls, t.head_reg, t.seg})
    if (v < 0) throw InvalidArgument("loss terms must be non-negative");
  return w.rpn_cls * t.rpn_cls + w.rpn_reg * t.rpn_reg + w.head_cls * t.head_cls + w.head_reg * t.head_reg +
         w.seg * t.seg;
}

struct TrainConfig {
  int iterations = 2000;
  double base_lr = 1e-3;
  int lr_step = 1500;
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  uint64_t seed = 1;
  LossWeights weights;
  RpnAssignConfig rpn;
  HeadSampleConfig head;
  ProposalConfig proposals{2000, 300, 0.7, 2.0};
  bool gt_as_proposals = true;
  double clip_norm = 0.0;  // global gradient-norm ceiling per step; 0 disables

  static TrainConfig paper() {
    TrainConfig c;
    c.iterations = 70000;
    c.lr_step = 50000;
    return c;
  }
  static TrainConfig desk() { return TrainConfig{}; }

  void validate() const {
    if (iterations < 0) throw InvalidArgument("train.iterations must be >= 0");
    if (!(base_lr >= 0)) throw InvalidArgument("train.lr must be >= 0");
    if (lr_step < 0) throw InvalidArgument("train.lr_step must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw InvalidArgument("train.momentum must be in [0,1)");
    if (!(weight_decay >= 0)) throw InvalidArgument("train.weight_decay must be >= 0");
    if (rpn.batch < 1 || head.batch < 1) throw InvalidArgument("train: batch sizes must be positive");
    if (!(clip_norm >= 0)) throw InvalidArgument("train.clip_norm must be >= 0");
    weights.validate();
  }
};

// Step policy: base before the boundary, base * factor at and after it.
inline double lr_at(const TrainConfig& c, int iter) { return iter < c.lr_step ? c.base_lr : c.base_lr * c.lr_factor; }

/// v <- momentum * v - lr * (g + wd * w); w <- w + v
inline void sgd_step(Tensor& w, const Tensor& g, Tensor& v, double lr, double momentum, double weight_decay) {
  if (w.dims() != g.dims() || w.dims() != v.dims())
    throw InvalidArgument("sgd_step: shape mismatch " + shape_str(w.dims()) + " / " + shape_str(g.dims()) + " / " +
                          shape_str(v.dims()));
  auto wd = w.data();
  auto gd = g.data();
  auto vd = v.data();
  for (size_t i = 0; i < wd.size(); ++i) {
    vd[i] = momentum * vd[i] - lr * (gd[i] + weight_decay * wd[i]);
    wd[i] += vd[i];
  }
}

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the norm before scaling.
inline double clip_gradients(Model& m, double max_norm) {
  double sq = 0.0;
  for (auto& [name, w] : m.params())
    if (w.has_grad())
      for (double g : w.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, w] : m.params())
      if (w.has_grad())
        for (double& g : w.grad()) g *= s;
  }
  return norm;
}

class SgdOptimizer {
 public:
  void step(Model& m, double lr, double momentum, double weight_decay) {
    for (auto& [name, w] : m.params()) {
      auto it = velocity_.find(name);
      if (it == velocity_.end()) it = velocity_.emplace(name, Tensor(w.dims())).first;
      const Tensor g = w.has_grad() ? Tensor(w.dims(), std::vector<double>(w.grad().begin(), w.grad().end()))
                                    : Tensor(w.dims());
      sgd_step(w, g, it->second, lr, momentum, weight_decay);
      round_to_storage(w);
    }
  }

 private:
  std::map<std::string, Tensor> velocity_;
};

struct LossRecord {
  int iter = 0;
  LossTerms terms;
};

inline std::string format_loss_line(const LossRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "iter %d rpn_cls %.6f rpn_reg %.6f head_cls %.6f head_reg %.6f seg %.6f total %.6f",
                r.iter, r.terms.rpn_cls, r.terms.rpn_reg, r.terms.head_cls, r.terms.head_reg, r.terms.seg,
                r.terms.total);
  return buf;
}

/// Trailing moving average of total loss; entry i averages iterations
/// max(0, i-window+1)..i.
inline std::vector<double> smoothed_totals(const std::vector<LossRecord>& log, int window = 100) {
  std::vector<double> out;
  double run = 0;
  for (size_t i = 0; i < log.size(); ++i) {
    run += log[i].terms.total;
    if (i >= static_cast<size_t>(window)) run -= log[i - static_cast<size_t>(window)].terms.total;
    out.push_back(run / static_cast<double>(std::min(i + 1, static_cast<size_t>(window))));
  }
  return out;
}

// Dense label map per training image (keyed by sample id).
using LabelMaps = std::map<int, std::vector<int>>;

struct StepGraph {
  LossTerms terms;
  Var total;
};

namespace detail {

inline Var rpn_reg_loss(Graph& g, Var reg, const RpnAssignment& a) {
  const size_t n = a.labels.size();
  const int sampled = a.num_positive() + a.num_negative();
  Tensor targets({static_cast<int>(n), 4}), weights({static_cast<int>(n), 4});
  for (size_t i = 0; i < n; ++i) {
    if (a.labels[i] != kAnchorPositive) continue;
    const RegressionTarget& t = a.targets[i];
    const double v[4] = {t.tx, t.ty, t.tw, t.th};
    for (int k = 0; k < 4; ++k) {
      targets[i * 4 + k] = v[k];
      weights[i * 4 + k] = 1.0 / sampled;
    }
  }
  return weighted_sum(g, smooth_l1(g, sub_const(g, reg, targets)), std::move(weights));
}

inline Var head_reg_loss(Graph& g, Var bbox, std::span<const HeadSample> samples, int classes,
                         std::span<const double> stds) {
  const int r = static_cast<int>(samples.size());
  Tensor targets({r, 4 * classes}), weights({r, 4 * classes});
  for (int i = 0; i < r; ++i) {
    const HeadSample& s = samples[static_cast<size_t>(i)];
    if (s.label <= 0) continue;
    const double v[4] = {s.target.tx / stds[0], s.target.ty / stds[1], s.target.tw / stds[2], s.target.th / stds[3]};
    for (int k = 0; k < 4; ++k) {
      const size_t o = static_cast<size_t>(i) * 4 * classes + 4 * static_cast<size_t>(s.label) + k;
      targets[o] = v[k];
      weights[o] = 1.0 / r;
    }
  }
  return weighted_sum(g, smooth_l1(g, sub_const(g, bbox, targets)), std::move(weights));
}

}  // namespace detail

/// Builds the joint loss for one image. seg_target may be null for the
/// baseline variant (the term is then 0). Proposals are treated as constants;
/// fixed_proposals replaces the RPN's own.
inline StepGraph build_step_loss(ParamBinder& p, const SceneSample& s, const std::vector<int>* seg_target,
                                 const TrainConfig& cfg, uint64_t step_seed,
                                 const std::vector<Box>* fixed_proposals = nullptr) {
  Graph& g = p.graph();
  const ModelSpec& spec = p.spec();
  const Rng step(step_seed);
  Features f = forward_trunk(p, s.image);
  RpnVars r = rpn_head(p, f.det_feat);
  const auto anchors = generate_anchors(spec.anchor_grid(), r.feat_h, r.feat_w);
  const RpnAssignment assign = assign_rpn_labels(anchors, s.gt_boxes, s.width, s.height, cfg.rpn, step.split("rpn")());

  StepGraph out;
  std::vector<std::pair<Var, double>> parts;
  Var rpn_cls = softmax_cross_entropy(g, r.cls, assign.labels);
  Var rpn_reg = detail::rpn_reg_loss(g, r.reg, assign);
  parts.push_back({rpn_cls, cfg.weights.rpn_cls});
  parts.push_back({rpn_reg, cfg.weights.rpn_reg});
  out.terms.rpn_cls = g.value(rpn_cls)[0];
  out.terms.rpn_reg = g.value(rpn_reg)[0];

  std::vector<Box> proposals =
      fixed_proposals ? *fixed_proposals
                      : make_proposals(anchors, g.value(r.cls), g.value(r.reg), s.width, s.height, cfg.proposals);
  if (cfg.gt_as_proposals)
    for (Box b : s.gt_boxes) {
      b.score = 1.0;
      proposals.push_back(b);
    }
  std::vector<HeadSample> samples;
  try {
    samples = sample_head_minibatch(proposals, s.gt_boxes, cfg.head, step.split("head")());
  } catch (const DegenerateBatch&) {
  }
  if (!samples.empty()) {
    std::vector<Box> rois;
    std::vector<int> labels;
    for (const HeadSample& h : samples) {
      rois.push_back(h.roi);
      labels.push_back(h.label);
    }
    HeadVars hv = detection_head(p, f, rois);
    Var head_cls = softmax_cross_entropy(g, hv.cls, labels);
    Var head_reg = detail::head_reg_loss(g, hv.bbox, samples, spec.object_classes, spec.bbox_stds);
    parts.push_back({head_cls, cfg.weights.head_cls});
    parts.push_back({head_reg, cfg.weights.head_reg});
    out.terms.head_cls = g.value(head_cls)[0];
    out.terms.head_reg = g.value(head_reg)[0];
  }
  if (spec.has_seg()) {
    if (!seg_target) throw MissingLabels("no segmentation labels for image " + std::to_string(s.id));
    const int k = spec.seg_classes;
    const int n = s.height * s.width;
    if (static_cast<int>(seg_target->size()) != n)
      throw MissingLabels("segmentation labels for image " + std::to_string(s.id) + " have the wrong size");
    for (int v : *seg_target)
      if (v < 0 || v >= k)
        throw MissingLabels("segmentation label " + std::to_string(v) + " out of range for " + std::to_string(k) +
                            " classes (image " + std::to_string(s.id) + ")");
    Var logits = reshape(g, channels_last(g, f.seg_scores), {n, k});
    Var seg = softmax_cross_entropy(g, logits, *seg_target);
    parts.push_back({seg, cfg.weights.seg});
    out.terms.seg = g.value(seg)[0];
  }
  Var total = scale(g, parts[0].first, parts[0].second);
  for (size_t i = 1; i < parts.size(); ++i) total = add(g, total, scale(g, parts[i].first, parts[i].second));
  out.total = total;
  out.terms.total = g.value(total)[0];
  return out;
}

using LossCallback = std::function<void(const LossRecord&)>;

namespace detail {

// Shared loop for plain and constrained training; only the seg target source differs.
inline std::vector<LossRecord> train_loop(Model& model, const Dataset& data, const TrainConfig& cfg,
                                          const std::function<const std::vector<int>*(const SceneSample&)>& seg_for,
                                          const LossCallback& on_step) {
  cfg.validate();
  if (data.samples.empty()) throw InvalidArgument("train: dataset is empty");
  const Rng root(cfg.seed);
  Rng pick = root.split("sample");
  SgdOptimizer opt;
  std::vector<LossRecord> log;
  log.reserve(static_cast<size_t>(cfg.iterations));
  for (int it = 0; it < cfg.iterations; ++it) {
    const SceneSample& s = data.samples[static_cast<size_t>(pick.uniform_int(0, static_cast<int>(data.samples.size()) - 1))];
    const std::vector<int>* target = model.spec().has_seg() ? seg_for(s) : nullptr;
    model.zero_grad();
    Graph g;
    ParamBinder p(g, model);
    StepGraph step = build_step_loss(p, s, target, cfg, root.split(static_cast<uint64_t>(it))());
    g.backward(step.total);
    if (cfg.clip_norm > 0) clip_gradients(model, cfg.clip_norm);
    opt.step(model, lr_at(cfg, it), cfg.momentum, cfg.weight_decay);
    LossRecord rec{it, step.terms};
    log.push_back(rec);
    if (on_step) on_step(rec);
  }
  model.zero_grad();
  return log;
}

}  // namespace detail

/// Checks that every sample carries the labels the variant needs.
inline void require_seg_labels(const Model& model, const Dataset& data) {
  if (!model.spec().has_seg()) return;
  for (const SceneSample& s : data.samples)
    if (!s.has_seg())
      throw MissingLabels(std::string("variant ") + variant_name(model.spec().variant) +
                          " needs segmentation labels, image " + std::to_string(s.id) + " has none");
}

inline std::vector<LossRecord> train(Model& model, const Dataset& data, const TrainConfig& cfg,
                                     const LossCallback& on_step = {}) {
  require_seg_labels(model, data);
  return detail::train_loop(
      model, data, cfg, [](const SceneSample& s) { return &s.seg_labels; }, on_step);
}

/// Training against hallucinated stuff labels in place of ground truth.
inline std::vector<LossRecord> train_constrained(Model& model, const Dataset& data, const LabelMaps& labels,
                                                 const TrainConfig& cfg, const LossCallback& on_step = {}) {
  if (!model.spec().has_seg()) throw MissingLabels("constrained training needs a model with a segmentation stage");
  for (const SceneSample& s : data.samples)
    if (!labels.count(s.id)) throw MissingLabels("no hallucinated labels for image " + std::to_string(s.id));
  return detail::train_loop(
      model, data, cfg,
      [&](const SceneSample& s) -> const std::vector<int>* {
        auto it = labels.find(s.id);
        if (it == labels.end()) throw MissingLabels("no hallucinated labels for image " + std::to_string(s.id));
        return &it->second;
      },
      on_step);
}

inline std::vector<int> segment(const Model& model, const Tensor& image) {
  if (!model.spec().has_seg()) throw MissingLabels("model has no segmentation stage");
  Graph g(false);
  ParamBinder p(g, model);
  Features f = forward_trunk(p, image);
  return argmax_labels(drop_batch_dim(g.value(f.seg_scores)));
}

/// Per-pixel argmax of the model's upsampled seg scores for each image.
inline LabelMaps hallucinate_labels(const Model& model, std::span<const SceneSample> images) {
  if (!model.spec().has_seg())
    throw MissingLabels(std::string("cannot hallucinate labels with a ") + variant_name(model.spec().variant) + " model");
  LabelMaps out;
  for (const SceneSample& s : images) out[s.id] = segment(model, s.image);
  return out;
}

/// Fraction of pixels where the model's segmentation equals the given maps.
inline double pixel_agreement(const Model& model, std::span<const SceneSample> images, const LabelMaps& labels) {
  long long same = 0, total = 0;
  for (const SceneSample& s : images) {
    auto it = labels.find(s.id);
    if (it == labels.end()) throw MissingLabels("no labels for image " + std::to_string(s.id));
    const auto pred = segment(model, s.image);
    if (pred.size() != it->second.size()) throw MissingLabels("label map size mismatch for image " + std::to_string(s.id));
    for (size_t i = 0; i < pred.size(); ++i) same += pred[i] == it->second[i];
    total += static_cast<long long>(pred.size());
  }
  return total ? static_cast<double>(same) / static_cast<double>(total) : 0.0;
}

}  // namespace stuffnet
