#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "stuffnet/tensor.hpp"

namespace stuffnet {

// Axis-aligned box in continuous half-open pixel coordinates; width = x1 - x0.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int label = 0;        // class id; 0 is background
  double score = 0.0;   // detection confidence
  bool ignore = false;  // excluded from evaluation matching

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return x0 + 0.5 * width(); }
  double cy() const { return y0 + 0.5 * height(); }
  bool valid() const { return x1 > x0 && y1 > y0; }
};

inline Box make_box(double x0, double y0, double x1, double y1, int label = 0, double score = 0.0) {
  Box b;
  b.x0 = x0;
  b.y0 = y0;
  b.x1 = x1;
  b.y1 = y1;
  b.label = label;
  b.score = score;
  return b;
}

struct AnchorGrid {
  double stride = 8;
  std::vector<double> scales{8, 16, 32};
  std::vector<double> aspect_ratios{0.5, 1, 2};  // h / w

  int k() const { return static_cast<int>(scales.size() * aspect_ratios.size()); }
};

struct RegressionTarget {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

inline double iou(const Box& a, const Box& b) {
  if (!a.valid() || !b.valid()) throw InvalidArgument("iou: degenerate box");
  const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Anchors in row-major cell order; within a cell, scales-major over ratios.
inline std::vector<Box> generate_anchors(const AnchorGrid& grid, int feat_h, int feat_w) {
  if (grid.k() < 1) throw InvalidArgument("generate_anchors: need at least one scale and ratio");
  std::vector<Box> out;
  out.reserve(static_cast<size_t>(feat_h) * feat_w * grid.k());
  for (int y = 0; y < feat_h; ++y)
    for (int x = 0; x < feat_w; ++x) {
      const double cx = (x + 0.5) * grid.stride, cy = (y + 0.5) * grid.stride;
      for (double s : grid.scales)
        for (double r : grid.aspect_ratios) {
          const double w = s / std::sqrt(r), h = s * std::sqrt(r);
          out.push_back(make_box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h));
        }
    }
  return out;
}

inline RegressionTarget encode(const Box& anchor, const Box& gt) {
  if (!anchor.valid() || !gt.valid()) throw InvalidArgument("encode: non-positive box extent");
  return {(gt.cx() - anchor.cx()) / anchor.width(), (gt.cy() - anchor.cy()) / anchor.height(),
          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

/// Inverse of encode. Log-scale deltas are clamped to max_log_scale when given.
inline Box decode(const Box& anchor, const RegressionTarget& t,
                  double max_log_scale = std::numeric_limits<double>::infinity()) {
  if (!anchor.valid()) throw InvalidArgument("decode: non-positive anchor extent");
  const double cx = anchor.cx() + t.tx * anchor.width();
  const double cy = anchor.cy() + t.ty * anchor.height();
  const double w = anchor.width() * std::exp(std::min(t.tw, max_log_scale));
  const double h = anchor.height() * std::exp(std::min(t.th, max_log_scale));
  Box b = anchor;
  b.x0 = cx - 0.5 * w;
  b.y0 = cy - 0.5 * h;
  b.x1 = cx + 0.5 * w;
  b.y1 = cy + 0.5 * h;
  return b;
}

// Indices sorted by descending score, ties by lower index.
inline std::vector<int> order_by_score(std::span<const Box> boxes) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return boxes[static_cast<size_t>(a)].score > boxes[static_cast<size_t>(b)].score; });
  return order;
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
inline std::vector<int> nms(std::span<const Box> boxes, double iou_threshold, int max_keep) {
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order_by_score(boxes)) {
    if (static_cast<int>(keep.size()) >= max_keep) break;
    if (suppressed[static_cast<size_t>(i)]) continue;
    keep.push_back(i);
    const Box& a = boxes[static_cast<size_t>(i)];
    for (size_t j = 0; j < boxes.size(); ++j)
      if (!suppressed[j] && static_cast<int>(j) != i && iou(a, boxes[j]) > iou_threshold) suppressed[j] = 1;
  }
  return keep;
}

inline std::vector<Box> clip_and_filter_proposals(std::span<const Box> boxes, double image_w, double image_h,
                                                  double min_size) {
  std::vector<Box> out;
  out.reserve(boxes.size());
  for (Box b : boxes) {
    b.x0 = std::clamp(b.x0, 0.0, image_w);
    b.x1 = std::clamp(b.x1, 0.0, image_w);
    b.y0 = std::clamp(b.y0, 0.0, image_h);
    b.y1 = std::clamp(b.y1, 0.0, image_h);
    if (b.width() >= min_size && b.height() >= min_size && b.valid()) out.push_back(b);
  }
  return out;
}

enum AnchorLabel : int { kAnchorIgnore = -1, kAnchorNegative = 0, kAnchorPositive = 1 };

struct RpnAssignConfig {
  int batch = 256;
  double pos_fraction = 0.5;
  double hi = 0.7;
  double lo = 0.3;
};

struct RpnAssignment {
  std::vector<int> labels;                 // AnchorLabel per anchor
  std::vector<RegressionTarget> targets;   // meaningful for positives only
  int num_positive() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 1)); }
  int num_negative() const { return static_cast<int>(std::count(labels.begin(), labels.end(), 0)); }
};

// Keeps `keep` randomly chosen entries of `idx`: shuffle the ascending index
// list with the generator, take the prefix.
inline std::vector<int> random_subset(std::vector<int> idx, size_t keep, Rng& rng) {
  if (idx.size() <= keep) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Labels anchors for RPN training: out-of-image anchors are ignored, IoU > hi
/// (or best anchor for a gt) is positive, IoU < lo is negative, then the batch
/// is subsampled to at most batch*pos_fraction positives and back-filled with
/// negatives.
inline RpnAssignment assign_rpn_labels(std::span<const Box> anchors, std::span<const Box> gts, double image_w,
                                       double image_h, const RpnAssignConfig& cfg, uint64_t seed) {
  if (!(0 <= cfg.lo && cfg.lo < cfg.hi && cfg.hi <= 1))
    throw InvalidArgument("assign_rpn_labels: thresholds must satisfy 0 <= lo < hi <= 1");
  const size_t na = anchors.size(), ng = gts.size();
  RpnAssignment out;
  out.labels.assign(na, kAnchorIgnore);
  out.targets.assign(na, RegressionTarget{});

  std::vector<char> inside(na, 0);
  for (size_t i = 0; i < na; ++i) {
    const Box& a = anchors[i];
    inside[i] = a.x0 >= 0 && a.y0 >= 0 && a.x1 <= image_w && a.y1 <= image_h;
  }

  std::vector<double> max_iou(na, 0.0);
  std::vector<int> argmax(na, -1);
  std::vector<double> gt_best(ng, 0.0);
  std::vector<double> overlaps(na * ng, 0.0);
  for (size_t i = 0; i < na; ++i) {
    if (!inside[i]) continue;
    for (size_t j = 0; j < ng; ++j) {
      const double v = iou(anchors[i], gts[j]);
      overlaps[i * ng + j] = v;
      if (argmax[i] < 0 || v > max_iou[i]) {
        max_iou[i] = v;
        argmax[i] = static_cast<int>(j);
      }
      gt_best[j] = std::max(gt_best[j], v);
    }
  }

  for (size_t i = 0; i < na; ++i) {
    if (!inside[i]) continue;
    if (max_iou[i] < cfg.lo) out.labels[i] = kAnchorNegative;
  }
  for (size_t j = 0; j < ng; ++j) {
    if (gt_best[j] <= 0) continue;
    for (size_t i = 0; i < na; ++i)
      if (inside[i] && overlaps[i * ng + j] == gt_best[j]) out.labels[i] = kAnchorPositive;
  }
  for (size_t i = 0; i < na; ++i)
    if (inside[i] && ng > 0 && max_iou[i] > cfg.hi) out.labels[i] = kAnchorPositive;

  Rng rng(seed);
  std::vector<int> pos, neg;
  for (size_t i = 0; i < na; ++i) {
    if (out.labels[i] == kAnchorPositive) pos.push_back(static_cast<int>(i));
    if (out.labels[i] == kAnchorNegative) neg.push_back(static_cast<int>(i));
  }
  const size_t max_pos = static_cast<size_t>(cfg.batch * cfg.pos_fraction);
  auto kept_pos = random_subset(pos, max_pos, rng);
  const size_t max_neg = static_cast<size_t>(cfg.batch) - kept_pos.size();
  auto kept_neg = random_subset(neg, max_neg, rng);

  std::fill(out.labels.begin(), out.labels.end(), kAnchorIgnore);
  for (int i : kept_pos) {
    out.labels[static_cast<size_t>(i)] = kAnchorPositive;
    out.targets[static_cast<size_t>(i)] =
        encode(anchors[static_cast<size_t>(i)], gts[static_cast<size_t>(argmax[static_cast<size_t>(i)])]);
  }
  for (int i : kept_neg) out.labels[static_cast<size_t>(i)] = kAnchorNegative;
  return out;
}

struct HeadSampleConfig {
  int batch = 128;
  double fg_fraction = 0.25;
  double fg_thresh = 0.5;
  double bg_lo = 0.1;
  double bg_hi = 0.5;
};

struct HeadSample {
  Box roi;
  int label = 0;  // 0 = background
  RegressionTarget target;
};

class DegenerateBatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Detection-head minibatch: up to batch*fg_fraction foreground rois (IoU >=
/// fg_thresh, labelled with the best gt's class), filled with background rois
/// whose best IoU lies in [bg_lo, bg_hi). Foreground first, then background,
/// each in ascending proposal order.
inline std::vector<HeadSample> sample_head_minibatch(std::span<const Box> proposals, std::span<const Box> gts,
                                                     const HeadSampleConfig& cfg, uint64_t seed) {
  if (!(cfg.bg_lo <= cfg.bg_hi && cfg.bg_hi <= cfg.fg_thresh))
    throw InvalidArgument("sample_head_minibatch: thresholds must satisfy bg_lo <= bg_hi <= fg_thresh");
  std::vector<int> fg, bg;
  std::vector<int> best_gt(proposals.size(), -1);
  for (size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    for (size_t j = 0; j < gts.size(); ++j) {
      const double v = iou(proposals[i], gts[j]);
      if (best_gt[i] < 0 || v > best) {
        best = v;
        best_gt[i] = static_cast<int>(j);
      }
    }
    if (best_gt[i] >= 0 && best >= cfg.fg_thresh)
      fg.push_back(static_cast<int>(i));
    else if (best >= cfg.bg_lo && best < cfg.bg_hi)
      bg.push_back(static_cast<int>(i));
  }
  if (fg.empty() && bg.empty()) throw DegenerateBatch("sample_head_minibatch: no foreground or background candidates");
  Rng rng(seed);
  const size_t max_fg = static_cast<size_t>(std::lround(cfg.batch * cfg.fg_fraction));
  auto kept_fg = random_subset(fg, max_fg, rng);
  auto kept_bg = random_subset(bg, static_cast<size_t>(cfg.batch) - kept_fg.size(), rng);

  std::vector<HeadSample> out;
  out.reserve(kept_fg.size() + kept_bg.size());
  for (int i : kept_fg) {
    const Box& gt = gts[static_cast<size_t>(best_gt[static_cast<size_t>(i)])];
    out.push_back({proposals[static_cast<size_t>(i)], gt.label, encode(proposals[static_cast<size_t>(i)], gt)});
  }
  for (int i : kept_bg) out.push_back({proposals[static_cast<size_t>(i)], 0, RegressionTarget{}});
  return out;
}

}  // namespace stuffnet
