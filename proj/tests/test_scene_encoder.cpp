#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "misty/scene_encoder.hpp"

using namespace misty;

namespace {

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.hidden = 8;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.enc_depth_agent = 1;
  cfg.enc_depth_map = 1;
  cfg.enc_depth_global = 1;
  cfg.point_extra_blocks = 1;
  return cfg;
}

Polyline random_polyline(Polyline::Kind kind, int n, Rng& rng) {
  Polyline p;
  p.kind = kind;
  for (int i = 0; i < n; ++i) {
    PolylineVector v;
    v.start = Point2(rng.uniform(-20.0, 20.0), rng.uniform(-20.0, 20.0));
    v.end = v.start + Point2(rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
    v.attr = RowVector::Zero(kVectorAttrDim);
    v.attr(kind == Polyline::Kind::Map ? 0 : 1) = 1.0;
    v.attr(2) = kind == Polyline::Kind::Map ? 13.0 : 0.0;
    p.vectors.push_back(v);
  }
  return p;
}

VectorizedScene random_scene(Rng& rng, int n_agent = 3, int n_map = 4) {
  VectorizedScene s;
  for (int i = 0; i < n_agent; ++i)
    s.agent_polylines.push_back(random_polyline(Polyline::Kind::Agent, 5 + i, rng));
  for (int i = 0; i < n_map; ++i)
    s.map_polylines.push_back(random_polyline(Polyline::Kind::Map, 8, rng));
  return s;
}

}  // namespace

TEST_CASE("attention pool: degenerate inputs and weighted-sum oracle") {
  Rng rng(41);
  AttentionPool pool(6, rng);

  Matrix one = rng.normal_matrix(1, 6);
  Tape t(false);
  CHECK((t.value(pool.apply(t, t.input(one))) - one).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(pool.weights(one)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  Matrix twin(2, 6);
  twin.row(0) = one.row(0);
  twin.row(1) = one.row(0);
  Matrix wts = pool.weights(twin);
  CHECK(wts(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(wts(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK((t.value(pool.apply(t, t.input(twin))) - one).cwiseAbs().maxCoeff() < 1e-12);

  Matrix feats = rng.normal_matrix(7, 6);
  Matrix alpha = pool.weights(feats);
  CHECK(alpha.minCoeff() >= 0.0);
  CHECK(alpha.sum() == doctest::Approx(1.0).epsilon(1e-10));
  Matrix oracle = Matrix::Zero(1, 6);
  for (Index i = 0; i < 7; ++i) oracle += alpha(i, 0) * feats.row(i);
  CHECK((t.value(pool.apply(t, t.input(feats))) - oracle).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("self attention block: equivariance, stochastic rows, single token") {
  Rng rng(42);
  SelfAttentionBlock blk(8, 2, 2, rng);

  Matrix x = rng.normal_matrix(5, 8);
  Tape t(false);
  std::vector<Matrix> attn;
  Matrix y = t.value(blk.apply(t, t.input(x), &attn));
  CHECK(y.rows() == 5);
  CHECK(y.cols() == 8);
  REQUIRE(attn.size() == 2);
  for (const auto& a : attn)
    for (Index i = 0; i < a.rows(); ++i)
      CHECK(a.row(i).sum() == doctest::Approx(1.0).epsilon(1e-10));

  std::vector<Index> perm{3, 0, 4, 1, 2};
  Matrix xp(5, 8);
  for (Index i = 0; i < 5; ++i) xp.row(i) = x.row(perm[std::size_t(i)]);
  Matrix yp = t.value(blk.apply(t, t.input(xp)));
  for (Index i = 0; i < 5; ++i)
    CHECK((yp.row(i) - y.row(perm[std::size_t(i)])).cwiseAbs().maxCoeff() < 1e-12);

  Matrix single = rng.normal_matrix(1, 8);
  Matrix ys1 = t.value(blk.apply(t, t.input(single)));
  Matrix ys2 = t.value(blk.apply(t, t.input(single)));
  CHECK((ys1 - ys2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("point encoder: zero preservation, residual isolation, row bookkeeping") {
  Rng rng(43);
  PointEncoder pe(10, 8, 1, rng);

  Tape t(false);
  Matrix zero_out = t.value(pe.apply(t, t.input(Matrix::Zero(3, 10))));
  CHECK(zero_out.cwiseAbs().maxCoeff() == 0.0);  // fresh nets have zero biases

  Matrix one_vec = rng.normal_matrix(1, 10);
  CHECK(t.value(pe.apply(t, t.input(one_vec))).rows() == 1);

  PointEncoder flat(10, 8, 0, rng);
  flat.mlp.zero_output();
  Matrix v = rng.normal_matrix(4, 10);
  Matrix got = t.value(flat.apply(t, t.input(v)));
  Matrix proj = (v * flat.proj_w.value).rowwise() + flat.proj_b.value.row(0);
  CHECK((got - proj).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scene encoder: shapes, modality errors, permutation invariance") {
  Rng rng(44);
  RunConfig cfg = tiny_config();
  SceneEncoder enc(cfg, rng);
  Rng srng(45);
  VectorizedScene scene = random_scene(srng);

  Tape t(false);
  SceneTokens tok = enc.encode(t, scene);
  CHECK(t.value(tok.agent).rows() == 1);
  CHECK(t.value(tok.agent).cols() == 8);
  CHECK(all_finite(t.value(tok.agent)));
  CHECK(all_finite(t.value(tok.map)));

  VectorizedScene empty_map = scene;
  empty_map.map_polylines.clear();
  CHECK_THROWS_AS(enc.encode(t, empty_map), StateError);
  VectorizedScene empty_agent = scene;
  empty_agent.agent_polylines.clear();
  CHECK_THROWS_AS(enc.encode(t, empty_agent), StateError);

  VectorizedScene shuffled = scene;
  std::swap(shuffled.map_polylines[0], shuffled.map_polylines[3]);
  std::swap(shuffled.map_polylines[1], shuffled.map_polylines[2]);
  std::rotate(shuffled.agent_polylines.begin(), shuffled.agent_polylines.begin() + 1,
              shuffled.agent_polylines.end());
  SceneTokens tok2 = enc.encode(t, shuffled);
  CHECK((t.value(tok2.agent) - t.value(tok.agent)).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((t.value(tok2.map) - t.value(tok.map)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("scene encoder: duplication and rigid translation both move the tokens") {
  Rng rng(46);
  SceneEncoder enc(tiny_config(), rng);
  Rng srng(47);
  VectorizedScene scene = random_scene(srng, 2, 3);

  Tape t(false);
  Matrix map_tok = t.value(enc.encode(t, scene).map);

  VectorizedScene dup = scene;
  dup.map_polylines.push_back(dup.map_polylines[0]);
  CHECK((t.value(enc.encode(t, dup).map) - map_tok).cwiseAbs().maxCoeff() > 1e-8);

  VectorizedScene moved = scene;
  for (auto& pl : moved.map_polylines)
    for (auto& v : pl.vectors) {
      v.start += Point2(1000.0, 1000.0);
      v.end += Point2(1000.0, 1000.0);
    }
  for (auto& pl : moved.agent_polylines)
    for (auto& v : pl.vectors) {
      v.start += Point2(1000.0, 1000.0);
      v.end += Point2(1000.0, 1000.0);
    }
  CHECK((t.value(enc.encode(t, moved).map) - map_tok).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("scene encoder gradients pass central differences") {
  Rng rng(48);
  RunConfig cfg = tiny_config();
  cfg.enc_depth_agent = cfg.enc_depth_map = cfg.enc_depth_global = 1;
  SceneEncoder enc(cfg, rng);
  Rng srng(49);
  VectorizedScene scene = random_scene(srng, 2, 2);
  Matrix target_a = rng.normal_matrix(1, 8), target_m = rng.normal_matrix(1, 8);

  NamedParams np;
  enc.collect(np);
  std::vector<Param*> ps;
  for (auto& [_, p] : np) ps.push_back(p);

  auto f = [&](bool with_grad) {
    Tape t(with_grad);
    SceneTokens tok = enc.encode(t, scene);
    Node loss = add(t, mse(t, tok.agent, t.constant(target_a)),
                    mse(t, tok.map, t.constant(target_m)));
    double out = t.value(loss)(0, 0);
    if (with_grad) t.backward(loss);
    return out;
  };
  CHECK(grad_check(f, ps, 1e-5) < 1e-4);
}
