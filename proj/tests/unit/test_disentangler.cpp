#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "spotdiff/disentangler.hpp"
#include "spotdiff/error.hpp"

using namespace spotdiff;
using oracle::Vec;

namespace {

LayerFeatureSet repeat_layers(const Vec& v) {
  Vec flat;
  for (int l = 0; l < 5; ++l) flat.insert(flat.end(), v.begin(), v.end());
  return LayerFeatureSet(Tensor::from({5, static_cast<int>(v.size())}, flat));
}

NuisanceFeatureSet nuisance(NuisanceFactor f, const Vec& v, FeatureOrigin o = FeatureOrigin::kPredicted) {
  return {f, o, repeat_layers(v)};
}

NuisanceFeatureSet nuisance_rows(NuisanceFactor f, const std::vector<Vec>& rows) {
  Vec flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return {f, FeatureOrigin::kPredicted, LayerFeatureSet(Tensor::from({5, static_cast<int>(rows[0].size())}, flat))};
}

DecoupleOptions mode(DecoupleMode m) {
  DecoupleOptions o;
  o.mode = m;
  return o;
}

void check_vec(const Vec& got, const Vec& want, double tol = 1e-12) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) <= tol);
}

double max_abs_diff(const Vec& a, const Vec& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ImageTensor random_image(Rng& rng) {
  ImageTensor img(32, 32, 3);
  for (double& p : img.pixels()) p = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("project_out worked examples") {
  check_vec(project_out(Vec{3, 4}, Vec{1, 0}, 1e-12), {0, 4});
  check_vec(project_out(Vec{1, 2, 3}, Vec{0, 0, 0}, 1e-12), {1, 2, 3});
  check_vec(project_out(Vec{2, 1}, Vec{1, 1}, 1e-12), {0.5, -0.5});
}

TEST_CASE("project_out input errors") {
  CHECK_THROWS_AS(project_out(Vec{1, 2}, Vec{1, 2, 3}, 1e-12), InputError);
  CHECK_THROWS_AS(project_out(Vec{1, NAN}, Vec{1, 2}, 1e-12), InputError);
  CHECK_THROWS_AS(project_out(Vec{1, 2}, Vec{INFINITY, 2}, 1e-12), InputError);
}

TEST_CASE("project_out matches the closed form and is orthogonal to u") {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 2 + trial % 30;
    const Vec v = oracle::random_vec(rng, d), u = oracle::random_vec(rng, d);
    const Vec r = project_out(v, u, degenerate_threshold(d));
    check_vec(r, oracle::project_out(v, u, degenerate_threshold(d)), 1e-12);
    CHECK(std::abs(oracle::dot(r, u)) <= 1e-12 * oracle::norm(r) * oracle::norm(u) + 1e-14);
  }
}

TEST_CASE("projection algebra over random cases") {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const int d = 2 + trial % 64;
    const double eps = degenerate_threshold(d);
    const Vec v = oracle::random_vec(rng, d), v2 = oracle::random_vec(rng, d), u = oracle::random_vec(rng, d);
    const Vec p = project_out(v, u, eps);
    const double scale = std::max(1.0, oracle::norm(v));

    CHECK(max_abs_diff(project_out(p, u, eps), p) <= 1e-12 * scale);

    Vec removed(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) removed[i] = v[i] - p[i];
    const double lhs = oracle::dot(v, v), rhs = oracle::dot(p, p) + oracle::dot(removed, removed);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * lhs);

    CHECK(oracle::norm(p) <= oracle::norm(v) * (1 + 1e-15));

    const double c = rng.uniform(-50.0, 50.0);
    if (std::abs(c) > 1e-3) {
      Vec cu(u.size());
      for (std::size_t i = 0; i < u.size(); ++i) cu[i] = c * u[i];
      CHECK(max_abs_diff(project_out(v, cu, eps), p) <= 1e-10 * scale);
    }

    const double a = rng.normal(), b = rng.normal();
    const Vec lhs_lin = project_out(oracle::axpy(a, v, b, v2), u, eps);
    const Vec rhs_lin = oracle::axpy(a, p, b, project_out(v2, u, eps));
    CHECK(max_abs_diff(lhs_lin, rhs_lin) <= 1e-10 * std::max(1.0, oracle::norm(lhs_lin)));
  }
}

TEST_CASE("decouple worked examples") {
  SUBCASE("joint mode with orthonormal factors") {
    const auto out = decouple(repeat_layers({1, 1, 1}), nuisance(NuisanceFactor::kPose, {1, 0, 0}),
                              nuisance(NuisanceFactor::kBackground, {0, 1, 0}), mode(DecoupleMode::kJoint));
    for (int l = 0; l < 5; ++l) check_vec(out.layer(l), {0, 0, 1});
  }
  SUBCASE("zero factors pass main through") {
    for (auto m : {DecoupleMode::kSequential, DecoupleMode::kJoint}) {
      const auto out = decouple(repeat_layers({1, -2, 3}), nuisance(NuisanceFactor::kPose, {0, 0, 0}),
                                nuisance(NuisanceFactor::kBackground, {0, 0, 0}), mode(m));
      for (int l = 0; l < 5; ++l) check_vec(out.layer(l), {1, -2, 3}, 0.0);
    }
  }
  SUBCASE("sequential mode subtracts pose then background") {
    const auto out = decouple(repeat_layers({1, 1}), nuisance(NuisanceFactor::kPose, {1, 0}),
                              nuisance(NuisanceFactor::kBackground, {1, 1}), mode(DecoupleMode::kSequential));
    for (int l = 0; l < 5; ++l) check_vec(out.layer(l), {-0.5, 0.5});
  }
}

TEST_CASE("decouple input errors") {
  const auto main = repeat_layers({1, 1});
  CHECK_THROWS_AS(decouple(main, nuisance(NuisanceFactor::kBackground, {1, 0}),
                           nuisance(NuisanceFactor::kPose, {0, 1}), DecoupleOptions{}),
                  InputError);
  CHECK_THROWS_AS(decouple_rows(Tensor::zeros({5, 2}), Tensor::zeros({4, 2}), Tensor::zeros({5, 2}), DecoupleOptions{}),
                  InputError);
  CHECK_THROWS_AS(parse_decouple_mode("both"), ConfigError);
}

TEST_CASE("joint mode is orthogonal to both factors; sequential to background") {
  Rng rng(3);
  for (int d : {8, 64, 768}) {
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Vec> m(5), p(5), b(5);
      for (int l = 0; l < 5; ++l) {
        m[l] = oracle::random_vec(rng, d);
        p[l] = oracle::random_vec(rng, d);
        b[l] = oracle::random_vec(rng, d);
      }
      const auto main = nuisance_rows(NuisanceFactor::kPose, m).layers;
      const auto pose = nuisance_rows(NuisanceFactor::kPose, p);
      const auto bg = nuisance_rows(NuisanceFactor::kBackground, b);
      const auto joint = decouple(main, pose, bg, mode(DecoupleMode::kJoint));
      const auto seq = decouple(main, pose, bg, mode(DecoupleMode::kSequential));
      for (int l = 0; l < 5; ++l) {
        CHECK(std::abs(oracle::cosine(joint.layer(l), p[l])) < 1e-6);
        CHECK(std::abs(oracle::cosine(joint.layer(l), b[l])) < 1e-6);
        CHECK(std::abs(oracle::cosine(seq.layer(l), b[l])) < 1e-6);
      }
    }
  }
}

TEST_CASE("sequential orthogonality to pose holds exactly when pose is orthogonal to background") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 16;
    const Vec m = oracle::random_vec(rng, d), p = oracle::random_vec(rng, d);
    const Vec b_free = oracle::random_vec(rng, d);
    const Vec b_orth = oracle::project_out(b_free, p, 0);
    const auto out_orth = decouple(repeat_layers(m), nuisance(NuisanceFactor::kPose, p),
                                   nuisance(NuisanceFactor::kBackground, b_orth), mode(DecoupleMode::kSequential));
    CHECK(std::abs(oracle::cosine(out_orth.layer(0), p)) < 1e-10);
    const auto out_free = decouple(repeat_layers(m), nuisance(NuisanceFactor::kPose, p),
                                   nuisance(NuisanceFactor::kBackground, b_free), mode(DecoupleMode::kSequential));
    CHECK(std::abs(oracle::cosine(out_free.layer(0), p)) > 1e-6);
  }
}

TEST_CASE("ablation flags bypass projections") {
  DecoupleOptions o;
  o.use_background = false;
  const auto out = decouple(repeat_layers({1, 1}), nuisance(NuisanceFactor::kPose, {1, 0}),
                            nuisance(NuisanceFactor::kBackground, {0, 1}), o);
  check_vec(out.layer(0), {0, 1});
  o.use_pose = false;
  const auto none = decouple(repeat_layers({1, 1}), nuisance(NuisanceFactor::kPose, {1, 0}),
                             nuisance(NuisanceFactor::kBackground, {0, 1}), o);
  check_vec(none.layer(0), {1, 1}, 0.0);
}

TEST_CASE("lift into a wider main space is the rectangular identity") {
  const Tensor n = Tensor::from({1, 2}, {3, 4});
  const Tensor lifted = lift_to_main(n, 4);
  CHECK(lifted.shape() == Shape{1, 4});
  check_vec(Vec(lifted.data().begin(), lifted.data().end()), {3, 4, 0, 0}, 0.0);
}

TEST_CASE("expert forward: zero init, oracle, determinism") {
  Rng rng(5);
  ExpertConfig ec;
  SUBCASE("zero bias-free expert maps zero to zero") {
    ExpertModel e(NuisanceFactor::kPose, ec, rng);
    for (const auto& p : e.parameters()) {
      Tensor t = p.tensor;
      for (double& v : t.mutable_data()) v = 0;
    }
    const auto out = predict_nuisance(LayerFeatureSet(Tensor::zeros({5, 64})), e);
    for (int l = 0; l < 5; ++l)
      for (double v : out.layers.layer(l)) CHECK(v == 0.0);
    CHECK(out.origin == FeatureOrigin::kPredicted);
  }
  SUBCASE("matches an independent three-layer perceptron on unit-RMS input and repeats exactly") {
    ExpertModel e(NuisanceFactor::kBackground, ec, rng);
    CHECK(e.mlp().depth() == 3);
    const LayerFeatureSet in(Tensor::from({5, 64}, rng.normal_vector(320)));
    const auto a = predict_nuisance(in, e), b = predict_nuisance(in, e);
    for (int l = 0; l < 5; ++l) {
      oracle::Vec x = in.layer(l);
      const double rms = oracle::norm(x) / std::sqrt(64.0);
      for (double& v : x) v /= rms;
      const auto want = oracle::mlp_forward(e.mlp(), x);
      const auto got = a.layers.layer(l);
      for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
      CHECK(a.layers.layer(l) == b.layers.layer(l));
    }
  }
  SUBCASE("input scale does not matter") {
    ExpertModel e(NuisanceFactor::kPose, ec, rng);
    const Tensor x = Tensor::from({5, 64}, rng.normal_vector(320));
    const auto a = predict_nuisance(LayerFeatureSet(x), e);
    const auto b = predict_nuisance(LayerFeatureSet(ops::scale(x, 1e-3)), e);
    for (int l = 0; l < 5; ++l) {
      const auto u = a.layers.layer(l), v = b.layers.layer(l);
      for (std::size_t i = 0; i < u.size(); ++i) CHECK(v[i] == doctest::Approx(u[i]).epsilon(1e-10));
    }
  }
  SUBCASE("wrong width is a configuration error") {
    ExpertModel e(NuisanceFactor::kPose, ec, rng);
    CHECK_THROWS_AS(predict_nuisance(LayerFeatureSet(Tensor::zeros({5, 16})), e), ConfigError);
  }
}

TEST_CASE("ground-truth features") {
  Rng rng(6);
  EncoderModel enc(EncoderConfig{}, rng);
  const ImageTensor a = random_image(rng), b = random_image(rng), c = random_image(rng);

  SUBCASE("three identical variants equal one encoding") {
    const std::vector<ImageTensor> same{a, a, a};
    const auto gt = ground_truth_features(NuisanceFactor::kPose, same, enc);
    const auto single = encode_image(a, enc);
    for (int l = 0; l < 5; ++l) check_vec(gt.layers.layer(l), single.layer(l), 1e-12);
    CHECK(gt.origin == FeatureOrigin::kGroundTruth);
  }
  SUBCASE("pose truth is the per-layer mean of the variants") {
    const std::vector<ImageTensor> views{a, b, c};
    const auto gt = ground_truth_features(NuisanceFactor::kPose, views, enc);
    const auto fa = encode_image(a, enc), fb = encode_image(b, enc), fc = encode_image(c, enc);
    for (int l = 0; l < 5; ++l) {
      Vec mean(64);
      for (int i = 0; i < 64; ++i) mean[i] = (fa.layer(l)[i] + fb.layer(l)[i] + fc.layer(l)[i]) / 3.0;
      check_vec(gt.layers.layer(l), mean, 1e-12);
    }
  }
  SUBCASE("zero background through a zero-bias encoder is zero") {
    EncoderConfig cfg;
    cfg.bias = false;
    EncoderModel zero_enc(cfg, rng);
    const std::vector<ImageTensor> bg{ImageTensor(32, 32, 3)};
    const auto gt = ground_truth_features(NuisanceFactor::kBackground, bg, zero_enc);
    for (int l = 0; l < 5; ++l)
      for (double v : gt.layers.layer(l)) CHECK(v == 0.0);
  }
  SUBCASE("no variants is an input error") {
    CHECK_THROWS_AS(ground_truth_features(NuisanceFactor::kPose, std::span<const ImageTensor>{}, enc), InputError);
  }
  SUBCASE("truth carries no gradient") {
    const std::vector<ImageTensor> one{a};
    CHECK_FALSE(ground_truth_features(NuisanceFactor::kBackground, one, enc).layers.tensor().requires_grad());
  }
}

TEST_CASE("alignment loss worked examples") {
  const Vec x{1, 0}, y{0, 1};
  const Vec half{0.5, std::sqrt(3.0) / 2};
  SUBCASE("prediction equal to truth") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, {1, 2}), nuisance(NuisanceFactor::kBackground, {3, 1})};
    CHECK(alignment_loss(p, p) == doctest::Approx(0.0).epsilon(1e-15));
  }
  SUBCASE("orthogonal prediction for both factors") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, x), nuisance(NuisanceFactor::kBackground, x)};
    std::vector<NuisanceFeatureSet> t{nuisance(NuisanceFactor::kPose, y), nuisance(NuisanceFactor::kBackground, y)};
    CHECK(alignment_loss(p, t) == doctest::Approx(2.0));
  }
  SUBCASE("two samples with pose cosines 1 and 0.5") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, x), nuisance(NuisanceFactor::kBackground, x),
                                      nuisance(NuisanceFactor::kPose, half), nuisance(NuisanceFactor::kBackground, y)};
    std::vector<NuisanceFeatureSet> t{nuisance(NuisanceFactor::kPose, x), nuisance(NuisanceFactor::kBackground, x),
                                      nuisance(NuisanceFactor::kPose, x), nuisance(NuisanceFactor::kBackground, y)};
    CHECK(alignment_loss(p, t) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("positive scaling is free, anything else costs") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, {2, 4}), nuisance(NuisanceFactor::kBackground, {0.1, 0.3})};
    std::vector<NuisanceFeatureSet> t{nuisance(NuisanceFactor::kPose, {1, 2}), nuisance(NuisanceFactor::kBackground, {1, 3})};
    CHECK(alignment_loss(p, t) == doctest::Approx(0.0).epsilon(1e-15));
    p[0] = nuisance(NuisanceFactor::kPose, {-1, -2});
    CHECK(alignment_loss(p, t) == doctest::Approx(2.0));
  }
  SUBCASE("zero-norm rows count as cosine zero") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, {0, 0}), nuisance(NuisanceFactor::kBackground, x)};
    std::vector<NuisanceFeatureSet> t{nuisance(NuisanceFactor::kPose, x), nuisance(NuisanceFactor::kBackground, x)};
    CHECK(alignment_loss(p, t) == doctest::Approx(1.0));
  }
  SUBCASE("bounded in [0,4] over random cases") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<NuisanceFeatureSet> p, t;
      for (int i = 0; i < 3; ++i) {
        for (auto f : {NuisanceFactor::kPose, NuisanceFactor::kBackground}) {
          p.push_back(nuisance(f, oracle::random_vec(rng, 4)));
          t.push_back(nuisance(f, oracle::random_vec(rng, 4)));
        }
      }
      const double l = alignment_loss(p, t);
      CHECK(l >= 0.0);
      CHECK(l <= 4.0);
    }
  }
  SUBCASE("mismatched batches are input errors") {
    std::vector<NuisanceFeatureSet> p{nuisance(NuisanceFactor::kPose, x)};
    std::vector<NuisanceFeatureSet> t{nuisance(NuisanceFactor::kBackground, x)};
    CHECK_THROWS_AS(alignment_loss(p, t), InputError);
    CHECK_THROWS_AS(alignment_loss(std::span<const NuisanceFeatureSet>{}, std::span<const NuisanceFeatureSet>{}), InputError);
  }
}

TEST_CASE("alignment loss and decouple gradients match central differences") {
  for (std::uint64_t seed : {21, 22, 23}) {
    Rng rng(seed);
    auto leaf = [&](int rows, int d) { return Tensor::from({rows, d}, rng.normal_vector(static_cast<std::size_t>(rows * d)), true); };
    Tensor pp = leaf(10, 6), pt = leaf(10, 6), bp = leaf(10, 6), bt = leaf(10, 6);
    auto l1 = [&] { return alignment_loss_rows(pp, pt, bp, bt); };
    CHECK(oracle::check_gradients(l1, {pp, pt, bp, bt}).error < 1e-4);

    Tensor m = leaf(5, 6), p = leaf(5, 6), b = leaf(5, 6);
    Tensor weights = Tensor::from({5, 6}, rng.normal_vector(30));
    for (auto dm : {DecoupleMode::kSequential, DecoupleMode::kJoint}) {
      auto f = [&] { return ops::sum(ops::mul(decouple_rows(m, p, b, mode(dm)), weights)); };
      CHECK(oracle::check_gradients(f, {m, p, b}).error < 1e-4);
    }
  }
}
