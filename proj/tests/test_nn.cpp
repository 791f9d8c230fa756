#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "misty/nn.hpp"

using namespace misty;

TEST_CASE("mlp stack forward equals manual layer composition") {
  Rng rng(31);
  MlpStack mlp({6, 10, 4}, {false, true}, {true, false}, rng);
  Matrix x = rng.normal_matrix(3, 6);

  Tape t(false);
  Matrix y = t.value(mlp.forward(t, t.input(x)));

  const auto& l0 = mlp.layers()[0];
  const auto& l1 = mlp.layers()[1];
  Matrix h = gelu_forward(((x * l0.weight.value).rowwise() + l0.bias.value.row(0)).eval());
  Matrix hn = layer_norm_forward(h, l1.ln_gamma.value.row(0), l1.ln_beta.value.row(0));
  Matrix want = (hn * l1.weight.value).rowwise() + l1.bias.value.row(0);
  CHECK((y - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("mlp stack collects uniquely named params and zero_output works") {
  Rng rng(32);
  MlpStack mlp({5, 8, 8, 2}, {false, true, true}, {true, true, false}, rng);
  NamedParams np;
  mlp.collect("enc/mlp", np);
  std::set<std::string> names;
  for (auto& [name, p] : np) {
    CHECK(p != nullptr);
    CHECK(names.insert(name).second);
    CHECK(name.rfind("enc/mlp/", 0) == 0);
  }
  // 3 layers: each w+b, layers 1..2 also ln_g+ln_b
  CHECK(np.size() == 3 * 2 + 2 * 2);

  mlp.zero_output();
  Tape t(false);
  Matrix y = t.value(mlp.forward(t, t.input(rng.normal_matrix(4, 5))));
  CHECK(y.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp stack gradients pass central differences") {
  Rng rng(33);
  MlpStack mlp({4, 6, 3}, {false, true}, {true, false}, rng);
  Matrix x = rng.normal_matrix(2, 4);
  Matrix target = rng.normal_matrix(2, 3);
  NamedParams np;
  mlp.collect("m", np);
  std::vector<Param*> ps;
  for (auto& [_, p] : np) ps.push_back(p);

  auto f = [&](bool with_grad) {
    Tape t(with_grad);
    Node y = with_grad ? mlp.forward(t, t.input(x)) : mlp.forward_frozen(t, t.input(x));
    Node loss = mse(t, y, t.constant(target));
    double out = t.value(loss)(0, 0);
    if (with_grad) t.backward(loss);
    return out;
  };
  CHECK(grad_check(f, ps, 1e-5) < 1e-6);
}

TEST_CASE("xavier init stays inside its uniform bound and biases start at zero") {
  Rng rng(34);
  Param w = make_linear_weight(30, 20, rng);
  double bound = std::sqrt(6.0 / (30 + 20));
  CHECK(w.value.cwiseAbs().maxCoeff() <= bound);
  CHECK(w.value.cwiseAbs().maxCoeff() > 0.1 * bound);
  CHECK(make_zeros(1, 20).value.norm() == 0.0);
  CHECK(make_ones_row(7).value.sum() == 7.0);
}

TEST_CASE("sgd momentum step matches hand-rolled update and clips by global norm") {
  Param p1(Matrix::Zero(1, 2));
  Param p2(Matrix::Zero(1, 1));
  p1.grad << 3.0, 0.0;
  p2.grad << 4.0;  // global norm 5 > clip 1 -> scale 0.2

  NamedParams np{{"a", &p1}, {"b", &p2}};
  SgdMomentum opt(0.1, 0.9, 1.0);
  opt.step(np);
  CHECK(opt.last_grad_norm() == doctest::Approx(5.0));
  // v = clipped grad; p -= lr * v
  CHECK(p1.value(0, 0) == doctest::Approx(-0.1 * 0.6));
  CHECK(p2.value(0, 0) == doctest::Approx(-0.1 * 0.8));

  p1.grad.setZero();
  p2.grad.setZero();
  opt.step(np);  // pure momentum carry
  CHECK(p1.value(0, 0) == doctest::Approx(-0.1 * 0.6 - 0.1 * 0.9 * 0.6));
  CHECK(p2.value(0, 0) == doctest::Approx(-0.1 * 0.8 - 0.1 * 0.9 * 0.8));

  opt.zero_grad(np);
  CHECK(p1.grad.norm() == 0.0);
}
