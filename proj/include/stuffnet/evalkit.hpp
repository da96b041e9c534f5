#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "stuffnet/boxgeom.hpp"

namespace stuffnet {

enum class SizeBin { all, small, medium, large };

inline const char* size_bin_name(SizeBin b) {
  switch (b) {
    case SizeBin::all: return "all";
    case SizeBin::small: return "small";
    case SizeBin::medium: return "medium";
    case SizeBin::large: return "large";
  }
  return "all";
}

inline SizeBin parse_size_bin(const std::string& s) {
  if (s == "all") return SizeBin::all;
  if (s == "small") return SizeBin::small;
  if (s == "medium") return SizeBin::medium;
  if (s == "large") return SizeBin::large;
  throw InvalidArgument("unknown size bin '" + s + "' (expected all, small, medium or large)");
}

// Area ceilings in px^2. Defaults are the usual 32^2 / 96^2 split.
struct SizeBins {
  double small_ceiling = 32.0 * 32.0;
  double medium_ceiling = 96.0 * 96.0;

  // Ceilings scaled for small synthetic images: side lengths shrink by image_size / 128.
  static SizeBins for_image_size(int image_size) {
    const double s = image_size / 128.0;
    return {32.0 * s * 32.0 * s, 96.0 * s * 96.0 * s};
  }

  void validate() const {
    if (!(0 < small_ceiling && small_ceiling < medium_ceiling))
      throw InvalidArgument("size bins must satisfy 0 < small ceiling < medium ceiling");
  }

  SizeBin classify(double area) const {
    if (area < small_ceiling) return SizeBin::small;
    if (area < medium_ceiling) return SizeBin::medium;
    return SizeBin::large;
  }

  bool contains(SizeBin bin, double area) const { return bin == SizeBin::all || classify(area) == bin; }
};

enum class Verdict { true_positive, false_positive, ignored };

// Matches one detection against unmatched non-ignore gts (best IoU >= thresh),
// falling back to an ignore gt overlap.
inline Verdict match_one(const Box& det, std::span<const Box> gts, std::vector<char>& used, double iou_thresh) {
  int best = -1;
  double best_iou = 0.0, best_ignore = 0.0;
  for (size_t g = 0; g < gts.size(); ++g) {
    const double v = iou(det, gts[g]);
    if (gts[g].ignore) {
      best_ignore = std::max(best_ignore, v);
    } else if (!used[g] && v >= iou_thresh && (best < 0 || v > best_iou)) {
      best = static_cast<int>(g);
      best_iou = v;
    }
  }
  if (best >= 0) {
    used[static_cast<size_t>(best)] = 1;
    return Verdict::true_positive;
  }
  return best_ignore >= iou_thresh ? Verdict::ignored : Verdict::false_positive;
}

/// Greedy score-ordered matching of one image's detections (single class)
/// against its ground truth. Verdicts are returned in input order.
inline std::vector<Verdict> match_detections(std::span<const Box> dets, std::span<const Box> gts,
                                             double iou_thresh = 0.5) {
  std::vector<Verdict> out(dets.size(), Verdict::false_positive);
  std::vector<char> used(gts.size(), 0);
  for (int d : order_by_score(dets)) out[static_cast<size_t>(d)] = match_one(dets[static_cast<size_t>(d)], gts, used, iou_thresh);
  return out;
}

/// All-points interpolated AP. Verdicts must be in descending score order;
/// ignored entries are skipped.
inline double average_precision(std::span<const Verdict> ranked, int n_gt) {
  if (n_gt <= 0) return 0.0;
  std::vector<double> prec, rec;
  int tp = 0, fp = 0;
  for (Verdict v : ranked) {
    if (v == Verdict::ignored) continue;
    (v == Verdict::true_positive ? tp : fp)++;
    prec.push_back(static_cast<double>(tp) / (tp + fp));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  for (size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0.0, prev_r = 0.0;
  for (size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

struct Detection {
  int image_id = 0;
  Box box;  // label = class, score = confidence
};

struct EvalReport {
  SizeBin bin = SizeBin::all;
  std::vector<double> ap;        // per class (index 0 = background, unused)
  std::vector<int> num_gt;       // non-ignore gts per class
  std::vector<int> num_tp;       // true positives per class
  double map = 0.0;
  bool empty = false;            // no class had a ground-truth box in the bin
};

/// Per-class AP and mAP over a set of images. gts are keyed by image id; with
/// a size bin, ground truth outside the bin is marked ignore before matching.
inline EvalReport evaluate_map(std::span<const Detection> dets, const std::map<int, std::vector<Box>>& gts,
                               int num_classes, SizeBin bin = SizeBin::all, const SizeBins& bins = SizeBins{},
                               double iou_thresh = 0.5) {
  EvalReport rep;
  rep.bin = bin;
  rep.ap.assign(static_cast<size_t>(num_classes), 0.0);
  rep.num_gt.assign(static_cast<size_t>(num_classes), 0);
  rep.num_tp.assign(static_cast<size_t>(num_classes), 0);

  std::map<int, std::vector<Box>> marked = gts;
  for (auto& [id, boxes] : marked)
    for (Box& b : boxes) {
      if (!bins.contains(bin, b.area())) b.ignore = true;
      if (!b.ignore && b.label > 0 && b.label < num_classes) rep.num_gt[static_cast<size_t>(b.label)]++;
    }

  double total = 0.0;
  int counted = 0;
  for (int c = 1; c < num_classes; ++c) {
    std::vector<const Detection*> cls;
    for (const Detection& d : dets)
      if (d.box.label == c) cls.push_back(&d);
    std::stable_sort(cls.begin(), cls.end(), [](const Detection* a, const Detection* b) {
      if (a->box.score != b->box.score) return a->box.score > b->box.score;
      return std::tie(a->image_id, a->box.x0, a->box.y0, a->box.x1, a->box.y1) <
             std::tie(b->image_id, b->box.x0, b->box.y0, b->box.x1, b->box.y1);
    });
    std::map<int, std::vector<Box>> cls_gts;
    std::map<int, std::vector<char>> used;
    for (const auto& [id, boxes] : marked) {
      for (const Box& b : boxes)
        if (b.label == c) cls_gts[id].push_back(b);
      used[id].assign(cls_gts[id].size(), 0);
    }
    std::vector<Verdict> ranked;
    ranked.reserve(cls.size());
    for (const Detection* d : cls) {
      const Verdict v = match_one(d->box, cls_gts[d->image_id], used[d->image_id], iou_thresh);
      ranked.push_back(v);
      if (v == Verdict::true_positive) rep.num_tp[static_cast<size_t>(c)]++;
    }
    rep.ap[static_cast<size_t>(c)] = average_precision(ranked, rep.num_gt[static_cast<size_t>(c)]);
    if (rep.num_gt[static_cast<size_t>(c)] > 0) {
      total += rep.ap[static_cast<size_t>(c)];
      ++counted;
    }
  }
  rep.empty = counted == 0;
  rep.map = counted ? total / counted : 0.0;
  return rep;
}

struct SegReport {
  std::vector<double> iou;     // per class; meaningful where present[k]
  std::vector<char> present;   // class occurs in prediction or ground truth
  double mean_iou = 0.0;
  double pixel_accuracy = 0.0;
};

/// Confusion-matrix segmentation metrics over K classes.
inline SegReport seg_metrics(std::span<const int> pred, std::span<const int> gt, int num_classes) {
  if (pred.size() != gt.size()) throw InvalidArgument("seg_metrics: label maps differ in size");
  const size_t k = static_cast<size_t>(num_classes);
  std::vector<long long> conf(k * k, 0);
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= num_classes || gt[i] < 0 || gt[i] >= num_classes)
      throw InvalidArgument("seg_metrics: label out of range");
    conf[static_cast<size_t>(gt[i]) * k + static_cast<size_t>(pred[i])]++;
  }
  SegReport r;
  r.iou.assign(k, 0.0);
  r.present.assign(k, 0);
  long long diag = 0;
  double sum = 0.0;
  int counted = 0;
  for (size_t c = 0; c < k; ++c) {
    long long row = 0, col = 0;
    for (size_t j = 0; j < k; ++j) {
      row += conf[c * k + j];
      col += conf[j * k + c];
    }
    const long long tp = conf[c * k + c];
    diag += tp;
    const long long denom = row + col - tp;
    if (denom == 0) continue;
    r.present[c] = 1;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.iou[c];
    ++counted;
  }
  r.mean_iou = counted ? sum / counted : 0.0;
  r.pixel_accuracy = pred.empty() ? 0.0 : static_cast<double>(diag) / static_cast<double>(pred.size());
  return r;
}

}  // namespace stuffnet
