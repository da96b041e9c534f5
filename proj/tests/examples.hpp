#pragma once

// Worked examples with known answers. Each entry throws on failure; the list is
// shared by the unit tests and the acceptance runner.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stuffnet/checkpoint.hpp"
#include "stuffnet/cli.hpp"
#include "stuffnet/config.hpp"
#include "stuffnet/evalkit.hpp"
#include "stuffnet/train.hpp"

namespace examples {

using namespace stuffnet;

struct Example {
  std::string name;
  std::function<void()> run;
};

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void expect(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

inline void expect_near(double a, double b, double tol, const std::string& what) {
  if (!(std::abs(a - b) <= tol))
    throw Failure(what + ": got " + std::to_string(a) + ", expected " + std::to_string(b));
}

template <class E, class F>
inline std::string expect_throw(F&& f, const std::string& what) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  throw Failure(what + ": expected an exception");
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("stuffnet_examples_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CliRun {
  int code;
  std::string out, err;
};

inline CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "stuffnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Graph helpers.
inline Tensor forward(const std::function<Var(Graph&)>& f) {
  Graph g(false);
  return g.value(f(g));
}

inline Tensor t4(int n, int c, int h, int w, std::vector<double> v) { return Tensor({n, c, h, w}, std::move(v)); }

inline Tensor random_tensor(Shape dims, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(dims));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline ModelSpec tiny_spec(Variant v) {
  ModelSpec s;
  s.variant = v;
  s.trunk_widths = {4, 4, 4};
  s.branch_width = 4;
  s.seg_hidden = 6;
  s.rpn_hidden = 6;
  s.fc_width = 8;
  return s;
}

inline SceneGenSpec tiny_data(int n, uint64_t seed = 3) {
  SceneGenSpec d;
  d.image_size = 32;
  d.num_images = n;
  d.small_min_side = 4;
  d.small_max_side = 8;
  d.large_min_side = 9;
  d.large_max_side = 16;
  d.max_objects = 3;
  d.seed = seed;
  return d;
}

// Dataset and trained checkpoints shared by the CLI examples.
struct CliFixture {
  std::filesystem::path dir, data, config, fused, baseline;
};

inline const CliFixture& cli_fixture() {
  static const CliFixture fx = [] {
    CliFixture f;
    f.dir = scratch_dir("cli");
    f.data = f.dir / "data";
    f.config = f.dir / "run.cfg";
    std::ofstream(f.config) << "data.image_size = 32\ndata.num_images = 4\ndata.small_min_side = 4\n"
                               "data.small_max_side = 8\ndata.large_min_side = 9\ndata.large_max_side = 16\n"
                               "model.trunk_widths = 4,4,4\nmodel.branch_width = 4\nmodel.seg_hidden = 6\n"
                               "model.rpn_hidden = 6\nmodel.fc_width = 8\ntrain.iterations = 3\n";
    const std::string cfg = f.config.string();
    if (cli({"--config", cfg, "gen-data", "--out", f.data.string()}).code != 0) throw Failure("fixture gen-data failed");
    f.fused = f.dir / "fused.snck";
    f.baseline = f.dir / "baseline.snck";
    if (cli({"--config", cfg, "train", "--data", f.data.string(), "--out", f.fused.string()}).code != 0)
      throw Failure("fixture fused training failed");
    std::ofstream(f.config, std::ios::app) << "model.variant = baseline\n";
    if (cli({"--config", cfg, "train", "--data", f.data.string(), "--out", f.baseline.string()}).code != 0)
      throw Failure("fixture baseline training failed");
    return f;
  }();
  return fx;
}

inline std::vector<Example> all() {
  std::vector<Example> ex;
  auto def = [&](std::string n, std::function<void()> f) { ex.push_back({std::move(n), std::move(f)}); };

  // Initialization.
  def("xavier_mean_near_zero", [] {
    Tensor t = xavier_init(1, 2, {10000}, 7);
    double m = 0;
    for (double v : t.data()) m += v;
    expect_near(m / 10000, 0.0, 0.02, "empirical mean");
  });
  def("xavier_bound_formula", [] {
    Tensor t = xavier_init(3, 3, {3, 3, 100}, 11);
    for (double v : t.data()) expect(v >= -1.0 && v <= 1.0, "sample outside [-1, 1]");
  });

  // Autograd.
  def("grad_of_linear_sum", [] {
    Graph g;
    Var w = g.leaf(Tensor({2, 3}, 0.7));
    g.backward(scale(g, sum(g, w), 2.0));
    for (double v : g.grad(w)) expect(v == 2.0, "grad entry != 2");
  });
  def("grad_of_constant", [] {
    Graph g;
    Var w = g.leaf(Tensor({4}, 1.0));
    Var c = g.constant(Tensor::scalar(3.0));
    g.backward(add(g, c, scale(g, sum(g, w), 0.0)));
    for (double v : g.grad(w)) expect(v == 0.0, "grad entry != 0");
  });
  def("fd_sum_exact", [] {
    ScalarGraphFn f = [](Graph& g, Var x) { return sum(g, x); };
    expect(finite_difference_check(f, Tensor({5}, std::vector<double>{1, -2, 3, 0.5, 4}), 0.5) == 0.0, "nonzero error");
  });
  def("fd_square_exact", [] {
    // x . x as a 1x1 by 1x1 fully-connected product.
    auto f = [](Graph& g, Var x) {
      Var row = reshape(g, x, {1, 1});
      Var col = reshape(g, x, {1, 1});
      return sum(g, fully_connected(g, row, col, g.constant(Tensor({1}))));
    };
    Graph g;
    Var x = g.leaf(Tensor({1}, std::vector<double>{3}));
    g.backward(f(g, x));
    expect_near(g.grad(x)[0], 6.0, 1e-12, "analytic");
    const double h = 0.5;
    const double num = ((3 + h) * (3 + h) - (3 - h) * (3 - h)) / (2 * h);
    expect(num == 6.0, "numeric");
    expect(finite_difference_check(f, Tensor({1}, std::vector<double>{3}), h) == 0.0, "fd error");
  });

  // Convolution.
  def("conv_1x1_scalar", [] {
    Tensor y = forward([](Graph& g) {
      return conv2d(g, g.constant(t4(1, 1, 1, 1, {3})), g.constant(t4(1, 1, 1, 1, {2})), g.constant(Tensor({1})), {});
    });
    expect(y.dims() == Shape{1, 1, 1, 1} && y[0] == 6, "[[3]] * [[2]] != [[6]]");
  });
  def("conv_ones_direct_sum", [] {
    Tensor y = forward([](Graph& g) {
      return conv2d(g, g.constant(Tensor({1, 1, 3, 3}, 1.0)), g.constant(Tensor({1, 1, 2, 2}, 1.0)),
                    g.constant(Tensor({1})), {});
    });
    expect(y.dims() == Shape{1, 1, 2, 2}, "shape");
    for (double v : y.data()) expect(v == 4, "entry != 4");
  });

  // Max pooling.
  def("maxpool_2x2", [] {
    Tensor y = forward([](Graph& g) { return maxpool2d(g, g.constant(t4(1, 1, 2, 2, {1, 2, 3, 4})), {2, 2, 0}); });
    expect(y.size() == 1 && y[0] == 4, "max != 4");
  });
  def("maxpool_window1_identity", [] {
    Rng rng(5);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Tensor y = forward([&](Graph& g) { return maxpool2d(g, g.constant(x), {1, 1, 0}); });
    expect(y.identical(x), "not identity");
  });

  // ROI pooling.
  def("roi_full_map_identity", [] {
    Rng rng(9);
    Tensor x = random_tensor({1, 1, 7, 7}, rng);
    Tensor y = forward([&](Graph& g) { return roi_maxpool(g, g.constant(x), RoiRect{0, 0, 7, 7}, 7); });
    expect(y.size() == 49, "size");
    for (size_t i = 0; i < 49; ++i) expect(y[i] == x[i], "cell differs");
  });
  def("roi_single_cell", [] {
    Rng rng(10);
    Tensor x = random_tensor({1, 1, 7, 7}, rng);
    x.at(0, 0, 3, 4) = 2.5;
    Tensor y = forward([&](Graph& g) { return roi_maxpool(g, g.constant(x), RoiRect{4, 3, 5, 4}, 7); });
    for (double v : y.data()) expect(v == 2.5, "bin != v");
  });

  // Upsampling.
  def("upsample_constant", [] {
    Tensor y = forward([](Graph& g) { return bilinear_upsample(g, g.constant(Tensor({1, 2, 3, 4}, 1.25)), 4); });
    for (double v : y.data()) expect_near(v, 1.25, 1e-12, "not constant");
  });
  def("upsample_factor1_identity", [] {
    Rng rng(12);
    Tensor x = random_tensor({1, 2, 3, 4}, rng);
    Tensor y = forward([&](Graph& g) { return bilinear_upsample(g, g.constant(x), 1); });
    expect(y.identical(x), "not identity");
  });

  // Smooth L1.
  def("smooth_l1_values", [] {
    expect(smooth_l1(0.0) == 0.0, "x=0");
    expect(smooth_l1(1.0) == 0.5 && smooth_l1(-1.0) == 0.5, "x=+-1");
    expect(smooth_l1(2.0) == 1.5, "x=2");
  });

  // Cross-entropy.
  def("cross_entropy_uniform_ln4", [] {
    for (int label = 0; label < 4; ++label) {
      std::vector<int> l{label};
      Tensor y = forward([&](Graph& g) { return softmax_cross_entropy(g, g.constant(Tensor({1, 4}, 0.3)), l); });
      expect_near(y[0], std::log(4.0), 1e-12, "loss");
    }
  });
  def("cross_entropy_peaked", [] {
    std::vector<int> l{2};
    Tensor y = forward([&](Graph& g) {
      return softmax_cross_entropy(g, g.constant(Tensor({1, 4}, std::vector<double>{0, 0, 60, 0})), l);
    });
    expect(y[0] < 1e-20, "loss not ~0");
  });

  // Fully connected.
  def("fc_identity", [] {
    Rng rng(13);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w({4, 4});
    for (int i = 0; i < 4; ++i) w[static_cast<size_t>(i) * 4 + static_cast<size_t>(i)] = 1;
    Tensor y = forward([&](Graph& g) { return fully_connected(g, g.constant(x), g.constant(w), g.constant(Tensor({4}))); });
    expect(y.vec() == x.vec(), "not identity");
  });
  def("fc_zero_weight_bias_rows", [] {
    Rng rng(14);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor b({2}, std::vector<double>{0.5, -1.5});
    Tensor y = forward([&](Graph& g) { return fully_connected(g, g.constant(x), g.constant(Tensor({4, 2})), g.constant(b)); });
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 2; ++c) expect(y[static_cast<size_t>(r * 2 + c)] == b[static_cast<size_t>(c)], "row != b");
  });

  // Box geometry.
  def("iou_identical", [] { expect(iou(make_box(1, 2, 5, 9), make_box(1, 2, 5, 9)) == 1.0, "!= 1"); });
  def("iou_disjoint", [] { expect(iou(make_box(0, 0, 2, 2), make_box(3, 3, 5, 5)) == 0.0, "!= 0"); });
  def("iou_one_seventh", [] {
    expect_near(iou(make_box(0, 0, 10, 10), make_box(5, 5, 15, 15)), 25.0 / 175.0, 1e-15, "iou");
  });
  def("anchor_single_cell", [] {
    auto a = generate_anchors(AnchorGrid{8, {8}, {1}}, 1, 1);
    expect(a.size() == 1, "count");
    expect(a[0].x0 == 0 && a[0].y0 == 0 && a[0].x1 == 8 && a[0].y1 == 8, "box");
    expect(a[0].cx() == 4 && a[0].cy() == 4, "center");
  });
  def("anchor_count_4x5", [] { expect(generate_anchors(AnchorGrid{}, 4, 5).size() == 180, "count != 180"); });
  def("anchor_ratio_preserves_area", [] {
    auto a = generate_anchors(AnchorGrid{16, {16}, {2}}, 1, 1);
    expect_near(a[0].width(), 16 / std::sqrt(2.0), 1e-12, "w");
    expect_near(a[0].height(), 16 * std::sqrt(2.0), 1e-12, "h");
    expect_near(a[0].area(), 256.0, 1e-12, "area");
  });
  def("encode_identity", [] {
    RegressionTarget t = encode(make_box(3, 4, 19, 12), make_box(3, 4, 19, 12));
    expect(t.tx == 0 && t.ty == 0 && t.tw == 0 && t.th == 0, "target != 0");
  });
  def("decode_zero_identity", [] {
    Box a = make_box(3, 4, 19, 12);
    Box d = decode(a, {});
    expect(d.x0 == a.x0 && d.y0 == a.y0 && d.x1 == a.x1 && d.y1 == a.y1, "decode != anchor");
  });
  def("nms_single_box", [] {
    std::vector<Box> b{make_box(0, 0, 4, 4, 0, 0.3)};
    expect(nms(b, 0.5, 10) == std::vector<int>{0}, "not kept");
  });
  def("nms_duplicate_pair", [] {
    std::vector<Box> b{make_box(0, 0, 4, 4, 0, 0.8), make_box(0, 0, 4, 4, 0, 0.9)};
    expect(nms(b, 0.5, 10) == std::vector<int>{1}, "kept wrong index");
  });
  def("rpn_anchor_equal_gt_positive", [] {
    auto anchors = generate_anchors(AnchorGrid{8, {8, 16}, {1}}, 4, 4);
    Box gt = anchors[10];
    gt.label = 1;
    RpnAssignment a = assign_rpn_labels(anchors, std::vector<Box>{gt}, 32, 32, RpnAssignConfig{}, 1);
    expect(a.labels[10] == kAnchorPositive, "not positive");
    const auto& t = a.targets[10];
    expect(t.tx == 0 && t.ty == 0 && t.tw == 0 && t.th == 0, "target != 0");
  });
  def("rpn_empty_gt_all_negative", [] {
    auto small = generate_anchors(AnchorGrid{8, {8}, {1}}, 4, 4);
    RpnAssignment a = assign_rpn_labels(small, std::vector<Box>{}, 32, 32, RpnAssignConfig{}, 1);
    expect(a.num_positive() == 0 && a.num_negative() == 16, "fewer than 256: all negatives");
    auto many = generate_anchors(AnchorGrid{4, {4}, {1}}, 20, 20);
    RpnAssignment b = assign_rpn_labels(many, std::vector<Box>{}, 80, 80, RpnAssignConfig{}, 1);
    expect(b.num_positive() == 0 && b.num_negative() == 256, "256 negatives");
  });
  def("head_sample_gt_class3", [] {
    std::vector<Box> gts{make_box(2, 2, 20, 20, 3)};
    std::vector<Box> props{make_box(2, 2, 20, 20)};
    auto s = sample_head_minibatch(props, gts, HeadSampleConfig{}, 1);
    expect(s.size() == 1 && s[0].label == 3, "label");
    expect(s[0].target.tx == 0 && s[0].target.ty == 0 && s[0].target.tw == 0 && s[0].target.th == 0, "target");
  });
  def("head_sample_below_bg_floor", [] {
    std::vector<Box> gts{make_box(0, 0, 10, 10, 1)};
    // 5 px^2 of overlap against 100 + 5 - 5: iou 0.05.
    std::vector<Box> props{make_box(9, 5, 10, 10), make_box(0, 0, 10, 10)};
    expect_near(iou(props[0], gts[0]), 0.05, 1e-12, "setup");
    auto s = sample_head_minibatch(props, gts, HeadSampleConfig{}, 1);
    for (const auto& h : s) expect(h.roi.x0 != 9, "low-overlap roi sampled");
  });
  def("clip_inside_unchanged", [] {
    auto c = clip_and_filter_proposals(std::vector<Box>{make_box(1, 2, 6, 7)}, 10, 10, 0);
    expect(c.size() == 1 && c[0].x0 == 1 && c[0].y0 == 2 && c[0].x1 == 6 && c[0].y1 == 7, "changed");
  });
  def("clip_negative_corner", [] {
    auto c = clip_and_filter_proposals(std::vector<Box>{make_box(-5, -5, 3, 3)}, 10, 10, 0);
    expect(c.size() == 1 && c[0].x0 == 0 && c[0].y0 == 0 && c[0].x1 == 3 && c[0].y1 == 3, "clip");
  });

  // Model.
  def("seg_map_twice_det_map", [] {
    Model m = build(tiny_spec(Variant::fused), 1);
    for (int side : {16, 24, 32, 40}) {
      Graph g(false);
      ParamBinder p(g, m);
      Features f = forward_trunk(p, Tensor({3, side, side + 8}, 0.4));
      const Tensor &d = g.value(f.det_feat), &s = g.value(f.seg_feat);
      expect(s.dim(2) == 2 * d.dim(2) && s.dim(3) == 2 * d.dim(3), "seg != 2x det");
    }
  });
  def("baseline_params_strict_subset", [] {
    auto b = build(tiny_spec(Variant::baseline), 1).param_names();
    auto f = build(tiny_spec(Variant::fused), 1).param_names();
    std::sort(b.begin(), b.end());
    std::sort(f.begin(), f.end());
    expect(b.size() < f.size() && std::includes(f.begin(), f.end(), b.begin(), b.end()), "not a strict subset");
    for (const auto& n : b) expect(n.find("_seg") == std::string::npos, "baseline has seg params");
  });
  def("zero_deltas_give_anchors", [] {
    Model m = build(tiny_spec(Variant::baseline), 1);
    for (double& v : m.param("rpn_reg.w").data()) v = 0;
    for (double& v : m.param("rpn_reg.b").data()) v = 0;
    ProposalConfig pc{100000, 100000, 1.0, 0.0};
    RpnOutput r = forward_rpn(m, Tensor({3, 32, 32}, 0.5), pc);
    auto clipped = clip_and_filter_proposals(r.anchors, 32, 32, 0);
    expect(r.proposals.size() == clipped.size(), "count");
    for (const Box& p : r.proposals) {
      bool found = false;
      // Centre/size decoding reproduces the corners up to rounding.
      for (const Box& a : clipped)
        found = found || (std::abs(a.x0 - p.x0) < 1e-12 && std::abs(a.y0 - p.y0) < 1e-12 &&
                          std::abs(a.x1 - p.x1) < 1e-12 && std::abs(a.y1 - p.y1) < 1e-12);
      expect(found, "proposal is not a clipped anchor");
    }
  });
  def("rpn_144_anchors_on_4x4", [] {
    Model m = build(tiny_spec(Variant::baseline), 1);
    RpnOutput r = forward_rpn(m, Tensor({3, 32, 32}, 0.5));
    expect(r.anchors.size() == 144 && r.scores.dim(0) == 144, "count != 144");
  });
  def("fuse_zero_seg_is_det", [] {
    Rng rng(15);
    Tensor d = random_tensor({1, 3, 4, 4}, rng);
    Tensor out = forward([&](Graph& g) {
      return fuse_roi_features(g, g.constant(d), g.constant(Tensor({1, 3, 8, 8})), RoiRect{0.5, 1, 3.5, 4}, 3);
    });
    Tensor ref = forward([&](Graph& g) { return roi_maxpool(g, g.constant(d), RoiRect{0.5, 1, 3.5, 4}, 3); });
    expect(out.vec() == ref.vec(), "fused != det");
  });
  def("fuse_nn_upscale_doubles", [] {
    Rng rng(16);
    Tensor d = random_tensor({1, 3, 4, 4}, rng);
    Tensor s({1, 3, 8, 8});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) s.at(0, c, y, x) = d.at(0, c, y / 2, x / 2);
    const RoiRect roi{1, 0, 4, 3};
    Tensor out = forward([&](Graph& g) { return fuse_roi_features(g, g.constant(d), g.constant(s), roi, 3); });
    Tensor ref = forward([&](Graph& g) { return roi_maxpool(g, g.constant(d), roi, 3); });
    for (size_t i = 0; i < out.size(); ++i) expect(out[i] == 2 * ref[i], "fused != 2x det");
  });
  def("fusion_collapse_bit_identical", [] {
    Model fused = build(tiny_spec(Variant::fused), 21);
    Model base(tiny_spec(Variant::baseline));
    for (const std::string& n : build(tiny_spec(Variant::baseline), 21).param_names()) base.add_param(n, fused.param(n));
    for (const char* n : {"conv4_2_seg.w", "conv4_2_seg.b"})
      for (double& v : fused.param(n).data()) v = 0;
    Rng rng(22);
    Tensor img = random_tensor({3, 32, 32}, rng, 0, 1);
    std::vector<Box> rois{make_box(0, 0, 32, 32), make_box(3, 5, 17, 20), make_box(10, 1, 30, 12)};
    expect(forward_heads(fused, img, rois).class_scores.identical(forward_heads(base, img, rois).class_scores),
           "class scores differ");
  });
  def("constant_input_whole_roi", [] {
    Model m = build(tiny_spec(Variant::baseline), 23);
    Graph g(false);
    ParamBinder p(g, m);
    // Zero padding makes trunk borders differ, so the constant map is given directly.
    Var flat = g.constant(Tensor({1, 4, 4, 4}, 0.75));
    const Tensor pooled = g.value(roi_maxpool(g, flat, RoiRect{0, 0, 4, 4}, 7));
    for (double v : pooled.data()) expect(v == 0.75, "pooled cell differs");
    const int d = 4 * 49;
    Var x = reshape(g, g.constant(pooled), {1, d});
    const Tensor h = g.value(fully_connected(g, x, p("fc6.w"), p("fc6.b")));
    const Tensor& w = m.param("fc6.w");
    for (int k = 0; k < m.spec().fc_width; ++k) {
      double s = 0;
      for (int i = 0; i < d; ++i) s += 0.75 * w[static_cast<size_t>(i) * m.spec().fc_width + static_cast<size_t>(k)];
      expect_near(h[static_cast<size_t>(k)], s + m.param("fc6.b")[static_cast<size_t>(k)], 1e-12, "fc output");
    }
  });

  // Checkpoints.
  def("checkpoint_roundtrip", [] {
    Model m = build(tiny_spec(Variant::fused), 31);
    auto dir = scratch_dir("ckpt");
    save_checkpoint(m, (dir / "m.snck").string());
    Model r = load_checkpoint((dir / "m.snck").string());
    expect(r.spec() == m.spec() && r.params().size() == m.params().size(), "structure");
    for (const auto& p : m.params()) expect(r.param(p.name).identical(p.value), p.name + " differs");
  });
  def("checkpoint_bad_magic", [] {
    std::string bytes = serialize_checkpoint(build(tiny_spec(Variant::baseline), 1));
    bytes[0] = 'X';
    const std::string msg = expect_throw<CheckpointError>([&] { parse_checkpoint(bytes); }, "corrupt magic");
    expect(msg.find("bad magic") != std::string::npos, "message: " + msg);
  });

  // Losses and optimization.
  def("total_loss_sum", [] { expect_near(total_loss({0.2, 0.1, 0.5, 0.3, 0.4, 0}), 1.5, 1e-15, "sum"); });
  def("total_loss_zero", [] { expect(total_loss({}) == 0.0, "nonzero"); });
  def("seg_weight_zero", [] {
    SceneGenSpec d = tiny_data(1);
    SceneSample s = generate_scene(d, 0);
    TrainConfig cfg;
    cfg.weights.seg = 0;
    Model m = build(tiny_spec(Variant::fused), 2);
    Graph g;
    ParamBinder p(g, m);
    StepGraph sg = build_step_loss(p, s, &s.seg_labels, cfg, 5);
    g.backward(sg.total);
    const LossTerms& t = sg.terms;
    expect_near(t.total, t.rpn_cls + t.rpn_reg + t.head_cls + t.head_reg, 1e-12, "total ignores seg");
    for (const char* n : {"fc8_seg.w", "fc8_seg.b", "fc6_seg.w"}) {
      const Tensor& w = m.param(n);
      for (double v : w.grad()) expect(v == 0.0, std::string(n) + " grad nonzero");
    }
  });
  def("lr_paper_preset", [] {
    const TrainConfig c = TrainConfig::paper();
    expect(lr_at(c, 0) == 1e-3, "iter 0");
    expect_near(lr_at(c, 50000), 1e-4, 1e-18, "iter 50000");
    expect(c.iterations == 70000 && c.momentum == 0.9, "schedule");
  });
  def("lr_desk_preset", [] {
    const TrainConfig c = TrainConfig::desk();
    expect(lr_at(c, 1499) == 1e-3, "iter 1499");
    expect_near(lr_at(c, 1500), 1e-4, 1e-18, "iter 1500");
  });
  def("sgd_no_gradient_no_change", [] {
    Tensor w({3}, std::vector<double>{1, -2, 3}), g({3}), v({3});
    const Tensor before = w;
    sgd_step(w, g, v, 0.1, 0.9, 0.0);
    expect(w.identical(before), "w changed");
  });
  def("sgd_weight_decay_only", [] {
    Tensor w({1}, std::vector<double>{1}), g({1}), v({1});
    sgd_step(w, g, v, 0.1, 0.0, 0.5);
    expect_near(v[0], -0.05, 1e-15, "v");
    expect_near(w[0], 0.95, 1e-15, "w");
  });
  def("zero_iterations", [] {
    Dataset d = generate_dataset(tiny_data(2));
    Model m = build(tiny_spec(Variant::fused), 3);
    const Model before = m;
    TrainConfig cfg;
    cfg.iterations = 0;
    expect(train(m, d, cfg).empty(), "log not empty");
    for (const auto& p : before.params()) expect(m.param(p.name).identical(p.value), "weights changed");
  });
  def("seeded_training_bit_identical", [] {
    Dataset d = generate_dataset(tiny_data(3));
    TrainConfig cfg;
    cfg.iterations = 4;
    Model a = build(tiny_spec(Variant::fused), 4), b = build(tiny_spec(Variant::fused), 4);
    train(a, d, cfg);
    train(b, d, cfg);
    expect(serialize_checkpoint(a) == serialize_checkpoint(b), "checkpoints differ");
  });

  // Segmentation outputs.
  def("argmax_strict_max", [] {
    Tensor s({5, 1, 2}, 0.0);
    s[3 * 2 + 1] = 1.0;
    auto l = argmax_labels(s);
    expect(l[1] == 3 && l[0] == 0, "label");
  });
  def("argmax_tie_lower", [] {
    Tensor s({5, 1, 1}, 0.0);
    s[1] = 2.0;
    s[4] = 2.0;
    expect(argmax_labels(s)[0] == 1, "tie");
  });
  def("constrained_lr0_constant_seg", [] {
    SceneGenSpec spec = tiny_data(1);
    spec.with_seg = false;
    Dataset d = generate_dataset(spec);
    Model m = build(tiny_spec(Variant::fused), 6);
    LabelMaps labels = hallucinate_labels(m, d.samples);
    TrainConfig cfg;
    cfg.iterations = 3;
    cfg.base_lr = 0;
    auto log = train_constrained(m, d, labels, cfg);
    for (const auto& r : log) expect(r.terms.seg == log[0].terms.seg, "seg loss moved");
  });
  def("constrained_zero_labels_match_plain", [] {
    SceneGenSpec spec = tiny_data(2);
    Dataset plain = generate_dataset(spec);
    LabelMaps zeros;
    for (auto& s : plain.samples) {
      zeros[s.id] = std::vector<int>(s.seg_labels.size(), 0);
      s.seg_labels = zeros[s.id];
    }
    Dataset bare = plain;
    for (auto& s : bare.samples) s.seg_labels.clear();
    TrainConfig cfg;
    cfg.iterations = 3;
    Model a = build(tiny_spec(Variant::fused), 7), b = build(tiny_spec(Variant::fused), 7);
    auto la = train(a, plain, cfg);
    auto lb = train_constrained(b, bare, zeros, cfg);
    for (size_t i = 0; i < la.size(); ++i) expect(la[i].terms.seg == lb[i].terms.seg, "seg loss differs");
  });

  // Vocabulary.
  def("merge_sidewalk_to_road", [] { expect(StuffVocabulary().canonical("sidewalk") == "road", "sidewalk"); });
  def("merge_canonical_identity", [] { expect(StuffVocabulary().canonical("water") == "water", "water"); });
  def("merge_idempotent", [] {
    StuffVocabulary v;
    std::vector<std::string> raw{"sidewalk", "runway", "ceiling", "grass", "platform", "sand", "snow", "sky", "water"};
    std::vector<int> map(raw.size());
    std::iota(map.begin(), map.end(), 0);
    auto once = merge_stuff_classes(map, raw, v);
    auto twice = merge_stuff_classes(once, v.names(), v);
    expect(once == twice, "not idempotent");
  });

  // Synthetic data.
  def("rho0_class_from_crop", [] {
    SceneGenSpec spec = tiny_data(20);
    spec.rho = 0;
    spec.noise = 0;
    const Dataset d = generate_dataset(spec);
    std::map<std::array<int, 3>, int> color_to_class;
    int checked = 0;
    for (const auto& s : d.samples)
      for (const Box& b : s.gt_boxes) {
        // Centre pixel is covered by every shape.
        const int x = static_cast<int>(b.cx()), y = static_cast<int>(b.cy());
        std::array<int, 3> c;
        for (int ch = 0; ch < 3; ++ch) c[static_cast<size_t>(ch)] = static_cast<int>(std::lround(255 * s.image[(static_cast<size_t>(ch) * s.height + y) * s.width + x]));
        auto [it, fresh] = color_to_class.emplace(c, b.label);
        expect(it->second == b.label, "one appearance, two classes");
        ++checked;
      }
    expect(checked > 0 && color_to_class.size() == static_cast<size_t>(spec.object_classes), "appearance per class");
  });
  def("scene_deterministic", [] {
    SceneGenSpec spec = tiny_data(1);
    SceneSample a = generate_scene(spec, 5), b = generate_scene(spec, 5);
    expect(a.image.identical(b.image) && a.seg_labels == b.seg_labels && a.gt_boxes.size() == b.gt_boxes.size(), "differs");
    for (size_t i = 0; i < a.gt_boxes.size(); ++i)
      expect(a.gt_boxes[i].x0 == b.gt_boxes[i].x0 && a.gt_boxes[i].label == b.gt_boxes[i].label, "box differs");
  });
  def("dataset_roundtrip", [] {
    const Dataset d = generate_dataset(tiny_data(3));
    auto dir = scratch_dir("roundtrip");
    write_dataset(d, dir);
    const Dataset r = read_dataset(dir);
    expect(r.samples.size() == d.samples.size() && r.vocab == d.vocab, "structure");
    for (size_t i = 0; i < d.samples.size(); ++i) {
      const auto &a = d.samples[i], &b = r.samples[i];
      expect(a.id == b.id && a.seg_labels == b.seg_labels, "labels");
      expect(a.gt_boxes.size() == b.gt_boxes.size(), "box count");
      for (size_t k = 0; k < a.gt_boxes.size(); ++k)
        expect(a.gt_boxes[k].x0 == b.gt_boxes[k].x0 && a.gt_boxes[k].y0 == b.gt_boxes[k].y0 &&
                   a.gt_boxes[k].x1 == b.gt_boxes[k].x1 && a.gt_boxes[k].y1 == b.gt_boxes[k].y1 &&
                   a.gt_boxes[k].label == b.gt_boxes[k].label,
               "box");
      for (size_t k = 0; k < a.image.size(); ++k) expect(std::abs(a.image[k] - b.image[k]) <= 1.0 / 255, "pixel");
    }
  });
  def("dataset_empty_dir", [] { expect(read_dataset(scratch_dir("empty")).samples.empty(), "not empty"); });
  def("annotation_line", [] {
    Box b = parse_box_line("3 4.0 4.0 20.0 20.0", "line");
    expect(b.label == 3 && b.x0 == 4 && b.y0 == 4 && b.x1 == 20 && b.y1 == 20, "parse");
  });

  // Evaluation.
  def("match_exact_tp", [] {
    std::vector<Box> d{make_box(0, 0, 10, 10, 1, 0.9)}, g{make_box(0, 0, 10, 10, 1)};
    expect(match_detections(d, g)[0] == Verdict::true_positive, "not TP");
  });
  def("match_iou04_fp", [] {
    // 40 / 100 overlap: iou 0.4.
    std::vector<Box> d{make_box(0, 0, 10, 7, 1, 0.9)}, g{make_box(0, 3, 10, 10, 1)};
    expect_near(iou(d[0], g[0]), 0.4, 1e-12, "setup");
    expect(match_detections(d, g)[0] == Verdict::false_positive, "not FP");
  });
  def("match_ignore_gt", [] {
    Box gt = make_box(0, 0, 10, 10, 1);
    gt.ignore = true;
    std::vector<Box> d{make_box(0, 0, 10, 8, 1, 0.9)}, g{gt};
    expect_near(iou(d[0], g[0]), 0.8, 1e-12, "setup");
    expect(match_detections(d, g)[0] == Verdict::ignored, "not ignored");
    std::vector<Verdict> v{Verdict::ignored};
    expect(average_precision(v, 0) == 0.0, "no recall contribution");
  });
  def("ap_single_tp", [] {
    std::vector<Verdict> v{Verdict::true_positive};
    expect(average_precision(v, 1) == 1.0, "AP");
  });
  def("ap_single_fp", [] {
    std::vector<Verdict> v{Verdict::false_positive};
    expect(average_precision(v, 1) == 0.0, "AP");
  });
  def("ap_five_sixths", [] {
    std::vector<Verdict> v{Verdict::true_positive, Verdict::false_positive, Verdict::true_positive};
    expect_near(average_precision(v, 2), 5.0 / 6.0, 1e-15, "AP");
  });
  def("map_perfect_all_bins", [] {
    const Dataset d = generate_dataset(tiny_data(6));
    std::vector<Detection> dets;
    std::map<int, std::vector<Box>> gts;
    for (const auto& s : d.samples) {
      gts[s.id] = s.gt_boxes;
      for (Box b : s.gt_boxes) {
        b.score = 1;
        dets.push_back({s.id, b});
      }
    }
    const SizeBins bins = SizeBins::for_image_size(32);
    for (SizeBin bin : {SizeBin::all, SizeBin::small, SizeBin::medium, SizeBin::large}) {
      EvalReport r = evaluate_map(dets, gts, 5, bin, bins);
      expect(r.empty || r.map == 1.0, std::string("bin ") + size_bin_name(bin));
    }
  });
  def("map_no_detections", [] {
    std::map<int, std::vector<Box>> gts{{0, {make_box(0, 0, 5, 5, 1)}}};
    expect(evaluate_map({}, gts, 3).map == 0.0, "mAP");
  });
  def("seg_metrics_identity", [] {
    std::vector<int> m{0, 1, 1, 3, 3, 3};
    SegReport r = seg_metrics(m, m, 5);
    expect(r.pixel_accuracy == 1.0 && r.mean_iou == 1.0, "metrics");
    for (int c : {0, 1, 3}) expect(r.present[static_cast<size_t>(c)] && r.iou[static_cast<size_t>(c)] == 1.0, "class iou");
  });
  def("seg_metrics_disjoint", [] {
    std::vector<int> p{0, 0, 1}, g{2, 2, 3};
    expect(seg_metrics(p, g, 4).mean_iou == 0.0, "mean iou");
  });

  // Command line.
  def("cli_gen_data_count", [] {
    auto dir = scratch_dir("gen10");
    CliRun r = cli({"gen-data", "--count", "10", "--out", (dir / "d").string()});
    expect(r.code == 0, "exit " + std::to_string(r.code) + ": " + r.err);
    std::ifstream in(dir / "d" / "manifest.txt");
    int n = 0;
    for (std::string l; std::getline(in, l);) n += !l.empty();
    expect(n == 10, "manifest ids: " + std::to_string(n));
  });
  def("cli_bad_rho_exit2", [] {
    auto dir = scratch_dir("badrho");
    std::ofstream(dir / "c.cfg") << "data.rho = 1.5\n";
    CliRun r = cli({"--config", (dir / "c.cfg").string(), "gen-data", "--out", (dir / "d").string()});
    expect(r.code == 2, "exit " + std::to_string(r.code));
    expect(r.err.find("data.rho") != std::string::npos, "message does not name the field: " + r.err);
  });
  def("cli_baseline_ignores_seg", [] { expect(std::filesystem::exists(cli_fixture().baseline), "no checkpoint"); });
  def("cli_fused_without_labels_exit4", [] {
    const auto& fx = cli_fixture();
    auto dir = scratch_dir("nolabels");
    CliRun g = cli({"--config", fx.config.string(), "gen-data", "--out", (dir / "d").string()});
    expect(g.code == 0, "gen-data");
    std::filesystem::remove_all(dir / "d" / "seg");
    std::ofstream(dir / "fused.cfg") << "model.trunk_widths = 4,4,4\nmodel.branch_width = 4\ntrain.iterations = 1\n";
    CliRun r = cli({"--config", (dir / "fused.cfg").string(), "train", "--data", (dir / "d").string(), "--out",
                    (dir / "m.snck").string()});
    expect(r.code == 4, "exit " + std::to_string(r.code));
  });
  def("cli_hallucinate_rerun_identical", [] {
    const auto& fx = cli_fixture();
    auto dir = scratch_dir("hall");
    for (const char* sub : {"a", "b"}) {
      CliRun r = cli({"hallucinate", "--data", fx.data.string(), "--checkpoint", fx.fused.string(), "--out",
                      (dir / sub).string()});
      expect(r.code == 0, "exit " + std::to_string(r.code) + ": " + r.err);
    }
    int files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
      expect(slurp(e.path()) == slurp(dir / "b" / e.path().filename()), "map differs");
      ++files;
    }
    expect(files == 4, "map count");
  });
  def("cli_hallucinate_baseline_exit4", [] {
    const auto& fx = cli_fixture();
    CliRun r = cli({"hallucinate", "--data", fx.data.string(), "--checkpoint", fx.baseline.string(), "--out",
                    (scratch_dir("hallb") / "o").string()});
    expect(r.code == 4, "exit " + std::to_string(r.code));
  });
  def("cli_detections_file_perfect", [] {
    const auto& fx = cli_fixture();
    const Dataset d = read_dataset(fx.data);
    auto dir = scratch_dir("detfile");
    std::ofstream out(dir / "dets.txt");
    for (const auto& s : d.samples)
      for (Box b : s.gt_boxes) {
        b.score = 1;
        out << format_detection_line(s.id, b) << '\n';
      }
    out.close();
    CliRun r = cli({"eval", "--data", fx.data.string(), "--detections-file", (dir / "dets.txt").string()});
    expect(r.code == 0, "exit " + std::to_string(r.code) + ": " + r.err);
    expect(r.out.find("map.all=1.0000") != std::string::npos, "output:\n" + r.out);
  });
  def("cli_empty_small_bin_warning", [] {
    auto dir = scratch_dir("nosmall");
    std::ofstream(dir / "c.cfg") << "data.image_size = 32\ndata.small_fraction = 0\ndata.small_min_side = 4\n"
                                    "data.small_max_side = 8\ndata.large_min_side = 20\ndata.large_max_side = 24\n";
    expect(cli({"--config", (dir / "c.cfg").string(), "gen-data", "--count", "3", "--out", (dir / "d").string()}).code == 0,
           "gen-data");
    std::ofstream(dir / "dets.txt") << "";
    CliRun r = cli({"eval", "--data", (dir / "d").string(), "--detections-file", (dir / "dets.txt").string(),
                    "--size-bin", "small"});
    expect(r.code == 0, "exit " + std::to_string(r.code));
    expect(r.out.find("map.small=0.0000") != std::string::npos && r.out.find("warning") != std::string::npos,
           "output:\n" + r.out);
  });
  def("cli_render_overlay_only", [] {
    const auto& fx = cli_fixture();
    auto dir = scratch_dir("render");
    CliRun r = cli({"render", "--data", fx.data.string(), "--checkpoint", fx.fused.string(), "--out",
                    (dir / "r").string(), "--ids", "0", "--threshold", "2"});
    expect(r.code == 0, "exit " + std::to_string(r.code) + ": " + r.err);
    const Model m = load_checkpoint(fx.fused.string());
    const Dataset d = read_dataset(fx.data);
    const SceneSample& s = d.samples[0];
    const auto seg = run_inference(m, s.image).seg_labels;
    const RgbImage ref = render_overlay(s.image, &seg, {}, 2.0);
    const RgbImage got = read_ppm(dir / "r" / "000000.ppm");
    expect(got.pixels == ref.pixels, "not a pure seg overlay");
  });
  def("cli_render_rerun_identical", [] {
    const auto& fx = cli_fixture();
    auto dir = scratch_dir("render2");
    for (const char* sub : {"a", "b"})
      expect(cli({"render", "--data", fx.data.string(), "--checkpoint", fx.fused.string(), "--out",
                  (dir / sub).string(), "--threshold", "0.0"})
                     .code == 0,
             "render");
    for (const auto& e : std::filesystem::directory_iterator(dir / "a"))
      expect(slurp(e.path()) == slurp(dir / "b" / e.path().filename()), "render differs");
  });
  return ex;
}

}  // namespace examples
