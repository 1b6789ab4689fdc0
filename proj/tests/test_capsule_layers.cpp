#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "deepcaps/capsule_layers.hpp"
#include "deepcaps/losses.hpp"
#include "doctest.h"
#include "oracles.hpp"
#include "support.hpp"

using namespace deepcaps;
using testing::check;
using testing::param_errors;
using testing::random_tensor;

namespace {

double norm_of(const double* v, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) s += v[i] * v[i];
  return std::sqrt(s);
}

LayerOptions full_gradient(bool batchnorm) {
  LayerOptions o;
  o.batchnorm = batchnorm;
  o.routing_gradient = RoutingGradient::Full;
  return o;
}

}  // namespace

TEST_CASE("squash fixed points and analytic norms") {
  Tensor<double> zero(Shape{1, 3});
  CHECK(squash_values(zero).storage() == zero.storage());

  Tensor<double> unit(Shape{1, 2}, {0.6, 0.8});
  Tensor<double> u = squash_values(unit);
  CHECK(norm_of(u.ptr(), 2) == doctest::Approx(0.5).epsilon(1e-7));
  CHECK(u[0] / u[1] == doctest::Approx(0.75));

  Tensor<double> three(Shape{1, 3}, {3.0, 0.0, 0.0});
  Tensor<double> t = squash_values(three);
  CHECK(norm_of(t.ptr(), 3) == doctest::Approx(0.9).epsilon(1e-8));
  CHECK(t[1] == 0.0);
}

TEST_CASE("squash property: norm below one, direction kept, monotone") {
  Rng rng(21);
  const std::size_t d = 8, count = 10000;
  Tensor<double> s(Shape{count, d});
  for (std::size_t i = 0; i < count; ++i) {
    const double scale = std::pow(10.0, rng.uniform(-4, 3));
    for (std::size_t k = 0; k < d; ++k) s[i * d + k] = rng.uniform(-scale, scale);
  }
  Tensor<double> v = squash_values(s);
  for (std::size_t i = 0; i < count; ++i) {
    const double ns = norm_of(s.ptr() + i * d, d), nv = norm_of(v.ptr() + i * d, d);
    CHECK(nv < 1.0);
    double dot = 0;
    for (std::size_t k = 0; k < d; ++k) dot += s[i * d + k] * v[i * d + k];
    CHECK(dot / (ns * nv) == doctest::Approx(1.0).epsilon(1e-6));
  }
  // monotone in |s| along a fixed direction
  double prev = -1;
  for (int i = 0; i <= 100; ++i) {
    Tensor<double> r(Shape{1, 2}, {0.05 * i, 0.0});
    const double n = norm_of(squash_values(r).ptr(), 2);
    CHECK(n > prev);
    prev = n;
  }
}

TEST_CASE("squash gradient is finite at the origin and correct elsewhere") {
  Rng rng(22);
  CHECK(std::isfinite(check<double>([](const DTensor<double>& x) { return squash(x); },
                                    Tensor<double>(Shape{2, 3}, 1e-9), rng)));
  CHECK(check<double>([](const DTensor<double>& x) { return squash(x); }, random_tensor(Shape{4, 5}, rng, -2, 2),
                      rng) < 1e-5);
}

TEST_CASE("conv_caps2d") {
  Rng rng(23);
  SUBCASE("1x1 identity kernel with n=d=1 squashes the scalar field") {
    ConvCaps2D<double> layer(1, 1, ConvCapsSpec{1, 1, 1, 1}, false, rng);
    layer.kernel().mutable_value().fill(1.0);
    Tensor<double> x = random_tensor(Shape{2, 4, 4, 1, 1}, rng);
    DTensor<double> y = layer.forward(DTensor<double>(x), Mode::Infer);
    CHECK(y.value().storage() == squash_values(x).storage());
  }
  SUBCASE("output shape") {
    ConvCaps2D<double> layer(4, 8, ConvCapsSpec{3, 2, 4, 8}, true, rng);
    DTensor<double> y = layer.forward(DTensor<double>(random_tensor(Shape{1, 8, 8, 4, 8}, rng)), Mode::Infer);
    CHECK(y.shape() == Shape{1, 4, 4, 4, 8});
  }
  SUBCASE("forward equals the hand composition bitwise") {
    ConvCaps2D<double> layer(2, 3, ConvCapsSpec{3, 1, 4, 2}, false, rng);
    layer.bias().mutable_value() = random_tensor(Shape{8}, rng);
    Tensor<double> x = random_tensor(Shape{2, 5, 5, 2, 3}, rng);
    DTensor<double> manual = squash(reshape(
        add_bias(conv2d(reshape(DTensor<double>(x), Shape{2, 5, 5, 6}), layer.kernel(), 1, Padding::Same),
                 layer.bias()),
        Shape{2, 5, 5, 4, 2}));
    CHECK(layer.forward(DTensor<double>(x), Mode::Infer).value().storage() == manual.value().storage());
  }
  SUBCASE("channel mismatch is an error") {
    ConvCaps2D<double> layer(2, 3, ConvCapsSpec{3, 1, 4, 2}, false, rng);
    CHECK_THROWS_AS(layer.forward(DTensor<double>(Tensor<double>(Shape{1, 4, 4, 2, 4})), Mode::Infer), ShapeError);
  }
}

TEST_CASE("capsule_cell") {
  Rng rng(24);
  const LayerOptions plain = full_gradient(false);
  CellSpec spec;
  spec.layers = {{3, 1, 2, 3}, {3, 1, 2, 3}, {3, 1, 2, 3}};
  spec.skip_from = 0;

  SUBCASE("zeroed non-skip path reduces to squash of the skip branch") {
    CapsuleCell<double> cell("cell", 4, 4, 1, 2, spec, plain, rng);
    cell.plain_layers()[2].kernel().mutable_value().fill(0.0);
    cell.plain_layers()[2].bias().mutable_value().fill(0.0);
    Tensor<double> x = random_tensor(Shape{1, 4, 4, 1, 2}, rng);
    DTensor<double> skip = cell.plain_layers()[0].forward(DTensor<double>(x), Mode::Infer);
    CHECK(cell.forward(DTensor<double>(x), Mode::Infer).value().storage() == squash(skip).value().storage());
  }
  SUBCASE("gradient reaches the first layer through the skip when the middle is zero") {
    CapsuleCell<double> cell("cell", 4, 4, 1, 2, spec, plain, rng);
    cell.plain_layers()[1].kernel().mutable_value().fill(0.0);
    cell.plain_layers()[1].bias().mutable_value().fill(0.0);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    DTensor<double> out = cell.forward(DTensor<double>(random_tensor(Shape{1, 4, 4, 1, 2}, rng)), Mode::Train);
    tape.backward(sum(norm_last(out)));
    const Tensor<double>& g = cell.plain_layers()[0].kernel().grad();
    REQUIRE_FALSE(g.empty());
    double mag = 0;
    for (double v : g.data()) mag += std::abs(v);
    CHECK(mag > 0.0);
  }
  SUBCASE("2-layer cell equals the hand-composed layers bitwise") {
    CellSpec two;
    two.layers = {{3, 1, 2, 3}, {3, 1, 2, 3}};
    two.skip_from = 0;
    CapsuleCell<double> cell("cell", 4, 4, 2, 3, two, plain, rng);
    Tensor<double> x = random_tensor(Shape{2, 4, 4, 2, 3}, rng);
    DTensor<double> a = cell.plain_layers()[0].forward(DTensor<double>(x), Mode::Infer);
    DTensor<double> b = cell.plain_layers()[1].preactivation(a, Mode::Infer);
    CHECK(cell.forward(DTensor<double>(x), Mode::Infer).value().storage() == squash(add(b, a)).value().storage());
  }
  SUBCASE("invalid specs name the cell") {
    CellSpec bad = spec;
    bad.skip_from = 2;
    CHECK_THROWS_WITH_AS(CapsuleCell<double>("cell7", 4, 4, 1, 2, bad, plain, rng), doctest::Contains("cell7"),
                         ConfigError);
    CellSpec mismatch;
    mismatch.layers = {{3, 1, 2, 3}, {3, 2, 2, 3}};
    mismatch.skip_from = 0;
    CHECK_THROWS_WITH_AS(CapsuleCell<double>("cell3", 4, 4, 1, 2, mismatch, plain, rng), doctest::Contains("cell3"),
                         ConfigError);
  }
}

TEST_CASE("vote_conv3d") {
  Rng rng(25);
  SUBCASE("identity block with a 1x1 kernel and one child type") {
    Tensor<double> k(Shape{4, 1, 1, 1, 4});
    for (std::size_t a = 0; a < 4; ++a) k.at({a, 0, 0, 0, a}) = 1.0;
    Tensor<double> x = random_tensor(Shape{2, 3, 3, 1, 4}, rng);
    DTensor<double> v = vote_conv3d(DTensor<double>(x), DTensor<double>(k), 1, 1, 4);
    REQUIRE(v.shape() == Shape{2, 3, 3, 1, 1, 4});
    CHECK(v.value().storage() == x.storage());
  }
  SUBCASE("shape arithmetic") {
    DTensor<double> v = vote_conv3d(DTensor<double>(Tensor<double>(Shape{1, 8, 8, 8, 16})),
                                    DTensor<double>(Tensor<double>(Shape{16, 3, 3, 1, 128})), 2, 8, 16);
    CHECK(v.shape() == Shape{1, 4, 4, 8, 8, 16});
  }
  SUBCASE("random cases against the explicit weighted-sum reference") {
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t H = 2 + rng.below(4), W = 2 + rng.below(4), n = 1 + rng.below(3), d = 1 + rng.below(3);
      const std::size_t m = 1 + rng.below(3), D = 1 + rng.below(3);
      const std::size_t kh = 1 + rng.below(std::min<std::size_t>(H, 3)), kw = 1 + rng.below(std::min<std::size_t>(W, 3));
      const std::size_t s = 1 + rng.below(2);
      Tensor<double> x = random_tensor(Shape{1 + rng.below(2), H, W, n, d}, rng);
      Tensor<double> k = random_tensor(Shape{d, kh, kw, 1, m * D}, rng);
      DTensor<double> v = vote_conv3d(DTensor<double>(x), DTensor<double>(k), s, m, D);
      CHECK(max_abs_diff(v.value(), oracle::votes(x, k, s, m, D)) < 1e-6);
    }
  }
  SUBCASE("gradients") {
    Tensor<double> x = random_tensor(Shape{1, 4, 4, 2, 3}, rng);
    DTensor<double> k(random_tensor(Shape{3, 3, 3, 1, 4}, rng));
    CHECK(check<double>([&](const DTensor<double>& in) { return vote_conv3d(in, k, 2, 2, 2); }, x, rng) < 1e-5);
    DTensor<double> X(x);
    CHECK(check<double>([&](const DTensor<double>& w) { return vote_conv3d(X, w, 2, 2, 2); }, k.value(), rng) < 1e-5);
  }
}

TEST_CASE("flatten_caps") {
  Rng rng(26);
  Tensor<double> x = random_tensor(Shape{1, 2, 2, 1, 4}, rng);
  DTensor<double> f = flatten_caps(DTensor<double>(x));
  CHECK(f.shape() == Shape{1, 4, 4});
  CHECK(f.value().storage() == x.storage());
  Tensor<double> y = random_tensor(Shape{2, 3, 4, 5, 2}, rng);
  DTensor<double> fy = flatten_caps(DTensor<double>(y));
  CHECK(unflatten_caps(fy, 3, 4, 5).value().storage() == y.storage());
  // (h=1, w=0, type=0) lands at 1*W*n
  for (std::size_t k = 0; k < 2; ++k) CHECK(fy.value().at({0, 1 * 4 * 5, k}) == y.at({0, 1, 0, 0, k}));
}

TEST_CASE("class_caps") {
  Rng rng(27);
  RoutingOptions ro;
  ro.iterations = 3;
  SUBCASE("a single input routes its vote unchanged through squash") {
    // The single child's coupling is 1 when the softmax runs over children.
    RoutingOptions children = ro;
    children.softmax_axis = SoftmaxAxis::Children;
    ClassCaps<double> head(1, 4, 3, 5, 0, children, rng);
    Tensor<double> x = random_tensor(Shape{1, 1, 4}, rng);
    DTensor<double> out = head.forward(DTensor<double>(x));
    const Tensor<double>& w = head.weights().value();
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> vote(5, 0.0);
      for (std::size_t e = 0; e < 5; ++e)
        for (std::size_t a = 0; a < 4; ++a) vote[e] += x[a] * w.at({0, a, c, e});
      const auto expect = oracle::squash_vec(vote);
      for (std::size_t e = 0; e < 5; ++e) CHECK(out.value().at({0, c, e}) == doctest::Approx(expect[e]).epsilon(1e-6));
    }
  }
  SUBCASE("a single input and a single class under the parent softmax") {
    ClassCaps<double> head(1, 3, 1, 2, 0, ro, rng);
    Tensor<double> x = random_tensor(Shape{1, 1, 3}, rng);
    const Tensor<double>& w = head.weights().value();
    std::vector<double> vote(2, 0.0);
    for (std::size_t e = 0; e < 2; ++e)
      for (std::size_t a = 0; a < 3; ++a) vote[e] += x[a] * w.at({0, a, 0, e});
    const auto expect = oracle::squash_vec(vote);
    DTensor<double> out = head.forward(DTensor<double>(x));
    for (std::size_t e = 0; e < 2; ++e) CHECK(out.value()[e] == doctest::Approx(expect[e]).epsilon(1e-6));
  }
  SUBCASE("zero transforms give zero norms") {
    ClassCaps<double> head(6, 4, 3, 5, 0, ro, rng);
    head.weights().mutable_value().fill(0.0);
    DTensor<double> n = norm_last(head.forward(DTensor<double>(random_tensor(Shape{2, 6, 4}, rng))));
    for (double v : n.value().data()) CHECK(v == 0.0);
  }
  SUBCASE("3 inputs, 2 classes, r=3 against the straight-line routing reference") {
    ClassCaps<double> head(3, 2, 2, 2, 0, ro, rng);
    Tensor<double> x = random_tensor(Shape{1, 3, 2}, rng);
    const Tensor<double>& w = head.weights().value();
    std::vector<std::vector<std::vector<double>>> u(3, std::vector<std::vector<double>>(2, std::vector<double>(2)));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t e = 0; e < 2; ++e) {
          double acc = 0;
          for (std::size_t a = 0; a < 2; ++a) acc += x.at({0, i, a}) * w.at({i, a, j, e});
          u[i][j][e] = acc;
        }
    const auto expect = oracle::route(u, 3);
    DTensor<double> out = head.forward(DTensor<double>(x));
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t e = 0; e < 2; ++e) CHECK(std::abs(out.value().at({0, j, e}) - expect[j][e]) < 1e-6);
  }
  SUBCASE("per-type sharing uses one transform per input type") {
    Tensor<double> x = random_tensor(Shape{2, 6, 3}, rng);
    Tensor<double> w = random_tensor(Shape{2, 3, 4, 2}, rng);
    DTensor<double> u = caps_transform(DTensor<double>(x), DTensor<double>(w));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t c = 0; c < 4; ++c)
          for (std::size_t e = 0; e < 2; ++e) {
            double acc = 0;
            for (std::size_t a = 0; a < 3; ++a) acc += x.at({n, i, a}) * w.at({i % 2, a, c, e});
            CHECK(u.value().at({n, i, c, e}) == doctest::Approx(acc).epsilon(1e-12));
          }
  }
}

TEST_CASE("layer gradients pass central differences at double precision") {
  Rng rng(28);
  const double tol = 1e-5;

  SUBCASE("conv capsule layer with batch norm") {
    ConvCaps2D<double> layer(2, 2, ConvCapsSpec{3, 2, 2, 3}, true, rng);
    const Tensor<double> x = random_tensor(Shape{2, 5, 5, 2, 2}, rng);
    const DTensor<double> X(x);
    CHECK(check<double>([&](const DTensor<double>& in) { return layer.forward(in, Mode::Train); }, x, rng) < tol);
    const Tensor<double> k0 = layer.kernel().value();
    CHECK(check<double>(
              [&](const DTensor<double>& k) {
                layer.kernel() = k;
                return layer.forward(X, Mode::Train);
              },
              k0, rng) < tol);
  }

  SUBCASE("capsule cell with skip, every parameter") {
    CellSpec spec;
    spec.layers = {{3, 2, 2, 2}, {3, 1, 2, 2}, {3, 1, 2, 2}};
    spec.skip_from = 0;
    for (bool bn : {false, true}) {
      CapsuleCell<double> cell("cell", 4, 4, 2, 2, spec, full_gradient(bn), rng);
      const Tensor<double> x = random_tensor(Shape{2, 4, 4, 2, 2}, rng);
      const DTensor<double> X(x);
      CHECK(check<double>([&](const DTensor<double>& in) { return cell.forward(in, Mode::Train); }, x, rng) < tol);
      ParamRegistry<double> reg;
      cell.collect("cell", reg);
      const Tensor<double> weights = random_tensor(cell.forward(X, Mode::Train).shape(), rng);
      for (const auto& e : param_errors<double>(
               reg, [&] { return testing::probe(cell.forward(X, Mode::Train), weights); }, 1e-6)) {
        INFO(e.name << " batchnorm=" << bn);
        if (bn && e.name.ends_with(".bias")) {
          // a bias feeding batch norm is cancelled by the mean subtraction
          CHECK(e.analytic_max < 1e-10);
          CHECK(e.numeric_max < 1e-8);
        } else {
          CHECK(e.worst < tol);
        }
      }
    }
  }

  SUBCASE("routed cell") {
    CellSpec spec;
    spec.layers = {{3, 1, 2, 2}, {3, 1, 2, 2}, {3, 1, 2, 2}};
    spec.skip_from = 0;
    spec.routed = true;
    CapsuleCell<double> cell("cell", 3, 3, 2, 2, spec, full_gradient(false), rng);
    const Tensor<double> x = random_tensor(Shape{1, 3, 3, 2, 2}, rng);
    CHECK(check<double>([&](const DTensor<double>& in) { return cell.forward(in, Mode::Train); }, x, rng) < tol);
    const DTensor<double> X(x);
    const Tensor<double> k0 = cell.routed_layer()->kernel().value();
    CHECK(check<double>(
              [&](const DTensor<double>& k) {
                cell.routed_layer()->kernel() = k;
                return cell.forward(X, Mode::Train);
              },
              k0, rng, 1e-5) < tol);
  }

  SUBCASE("class capsules") {
    RoutingOptions ro{3, SoftmaxAxis::Parents, RoutingGradient::Full};
    ClassCaps<double> head(4, 3, 3, 2, 0, ro, rng);
    const Tensor<double> x = random_tensor(Shape{2, 4, 3}, rng);
    CHECK(check<double>([&](const DTensor<double>& in) { return head.forward(in); }, x, rng) < tol);
    const DTensor<double> X(x);
    const Tensor<double> w0 = head.weights().value();
    CHECK(check<double>(
              [&](const DTensor<double>& w) {
                head.weights() = w;
                return head.forward(X);
              },
              w0, rng) < tol);
  }

  SUBCASE("final-iteration routing gradient is exact for a single iteration") {
    RoutingOptions ro{1, SoftmaxAxis::Parents, RoutingGradient::FinalIteration};
    ClassCaps<double> head(4, 3, 3, 2, 0, ro, rng);
    CHECK(check<double>([&](const DTensor<double>& in) { return head.forward(in); }, random_tensor(Shape{2, 4, 3}, rng),
                        rng) < tol);
  }
}

// Float central differences are limited by roundoff (small steps) or
// truncation (large steps) well above 1e-3 on small entries, so the reference
// is the central difference of a double-precision twin holding the same weights.
TEST_CASE("single-precision cell + margin loss gradients within 1e-3") {
  Rng rng(29), other(30);
  CellSpec spec;
  spec.layers = {{3, 1, 2, 2}, {3, 1, 2, 2}};
  spec.skip_from = 0;
  const LayerOptions opts = full_gradient(false);
  const RoutingOptions ro{3, SoftmaxAxis::Parents, RoutingGradient::Full};
  CapsuleCell<float> cell("cell", 3, 3, 1, 2, spec, opts, rng);
  ClassCaps<float> head(18, 2, 2, 2, 0, ro, rng);
  CapsuleCell<double> cell64("cell", 3, 3, 1, 2, spec, opts, other);
  ClassCaps<double> head64(18, 2, 2, 2, 0, ro, other);
  const Tensor<float> x = random_tensor<float>(Shape{2, 3, 3, 1, 2}, rng, -2, 2);
  const DTensor<float> X(x);
  const DTensor<double> X64(x.cast<double>());
  const MarginParams mp;

  ParamRegistry<float> reg;
  cell.collect("cell", reg);
  head.collect("head", reg);
  ParamRegistry<double> reg64;
  cell64.collect("cell", reg64);
  head64.collect("head", reg64);
  for (std::size_t i = 0; i < reg.params().size(); ++i) {
    DTensor<double> h = reg64.params()[i].tensor;
    h.mutable_value() = reg.params()[i].tensor.value().cast<double>();
  }

  {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    tape.backward(margin_loss(norm_last(head.forward(flatten_caps(cell.forward(X, Mode::Train)))),
                              one_hot<float>({0, 1}, 2), mp));
  }
  auto loss64 = [&] {
    return margin_loss(norm_last(head64.forward(flatten_caps(cell64.forward(X64, Mode::Train)))),
                       one_hot<double>({0, 1}, 2), mp);
  };
  for (std::size_t k = 0; k < reg.params().size(); ++k) {
    const Tensor<float>& g = reg.params()[k].tensor.grad();
    DTensor<double> h = reg64.params()[k].tensor;
    REQUIRE(g.numel() == h.numel());
    double worst = 0;
    for (std::size_t i = 0; i < h.numel(); ++i) {
      const double w = h.value()[i], eps = 1e-6;
      h.mutable_value()[i] = w + eps;
      const double up = loss64().value()[0];
      h.mutable_value()[i] = w - eps;
      const double down = loss64().value()[0];
      h.mutable_value()[i] = w;
      const double numeric = (up - down) / (2 * eps);
      worst = std::max(worst, std::abs(g[i] - numeric) / std::max({std::abs(double(g[i])), std::abs(numeric), 1e-8}));
    }
    INFO(reg.params()[k].name);
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("double-precision cell + margin loss gradients within 1e-5") {
  Rng rng(31);
  CellSpec spec;
  spec.layers = {{3, 1, 2, 2}, {3, 1, 2, 2}};
  spec.skip_from = 0;
  CapsuleCell<double> cell("cell", 3, 3, 1, 2, spec, full_gradient(false), rng);
  ClassCaps<double> head(18, 2, 2, 2, 0, RoutingOptions{3, SoftmaxAxis::Parents, RoutingGradient::Full}, rng);
  const DTensor<double> X(random_tensor(Shape{2, 3, 3, 1, 2}, rng, -2, 2));
  ParamRegistry<double> reg;
  cell.collect("cell", reg);
  head.collect("head", reg);
  const MarginParams mp;
  for (const auto& e : param_errors<double>(
           reg,
           [&] {
             return margin_loss(norm_last(head.forward(flatten_caps(cell.forward(X, Mode::Train)))),
                                one_hot<double>({0, 1}, 2), mp);
           },
           1e-6)) {
    INFO(e.name);
    CHECK(e.worst < 1e-5);
  }
}
