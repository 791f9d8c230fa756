#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "misty/manifold.hpp"

using namespace misty;

namespace {

RunConfig tiny_vae_config() {
  RunConfig cfg;
  cfg.horizon = 12;
  cfg.vae_hidden = 32;
  cfg.vae_blocks = 2;
  cfg.latent = 8;
  return cfg;
}

std::vector<Trajectory> planted_clusters(int per_class, int n_classes, int horizon, Rng& rng,
                                         std::vector<int>* labels = nullptr) {
  std::vector<Trajectory> out;
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Trajectory t(horizon, 2);
      for (int s = 0; s < horizon; ++s) {
        t(s, 0) = 10.0 * c + 0.01 * rng.normal();
        t(s, 1) = 3.0 * (c % 4) + 0.01 * rng.normal();
      }
      out.push_back(t);
      if (labels) labels->push_back(c);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("displacement transform: zeros, uniform motion, translation invariance") {
  Trajectory constant = Trajectory::Ones(5, 2) * 3.0;
  CHECK(to_displacements(constant).cwiseAbs().maxCoeff() == 0.0);

  Trajectory uniform(4, 2);
  uniform << 0, 0, 1, 0, 2, 0, 3, 0;
  Matrix d = to_displacements(uniform);
  CHECK(d.rows() == 3);
  for (Index i = 0; i < 3; ++i) {
    CHECK(d(i, 0) == 1.0);
    CHECK(d(i, 1) == 0.0);
  }

  Rng rng(61);
  Trajectory t = rng.normal_matrix(7, 2);
  Trajectory shifted = t;
  shifted.col(0).array() += 50.0;
  shifted.col(1).array() -= 20.0;
  CHECK((to_displacements(t) - to_displacements(shifted)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(to_displacements(Trajectory::Zero(1, 2)), InputError);

  Trajectory back = from_displacements(to_displacements(t), Point2(t(0, 0), t(0, 1)));
  CHECK((back - t).cwiseAbs().maxCoeff() < 1e-12);

  Tape tape(false);
  Matrix flat(1, 14);
  for (Index i = 0; i < 7; ++i) {
    flat(0, 2 * i) = t(i, 0);
    flat(0, 2 * i + 1) = t(i, 1);
  }
  Matrix dn = tape.value(displacement_rows(tape, tape.input(flat)));
  CHECK((dn.row(0) - flatten_displacements(to_displacements(t))).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("vae encode: determinism, positive sigma, zero fixture") {
  Rng rng(62);
  RunConfig cfg = tiny_vae_config();
  TrajVae vae(cfg, rng);

  Matrix x = rng.normal_matrix(3, vae.in_dim());
  Matrix mu1, s1, mu2, s2;
  vae.encode_plain(x, mu1, s1);
  vae.encode_plain(x, mu2, s2);
  CHECK((mu1 - mu2).cwiseAbs().maxCoeff() == 0.0);

  for (int i = 0; i < 1000; ++i) {
    Matrix mu, s;
    vae.encode_plain(rng.normal_matrix(1, vae.in_dim()) * 5.0, mu, s);
    CHECK(s.minCoeff() > 0.0);
  }

  Matrix mu0, s0;
  vae.encode_plain(Matrix::Zero(1, vae.in_dim()), mu0, s0);
  CHECK(mu0.cwiseAbs().maxCoeff() == 0.0);  // fresh nets are zero-bias
  CHECK((s0.array() - 1.0).abs().maxCoeff() == 0.0);
}

TEST_CASE("reparameterize: eps fixture, Monte Carlo mean, positivity check") {
  Rng rng(63);
  Matrix mu = rng.normal_matrix(1, 8);
  Matrix sigma = rng.normal_matrix(1, 8).cwiseAbs() * 0.5;
  sigma.array() += 0.1;

  CHECK((reparameterize(mu, sigma, Matrix::Zero(1, 8)) - mu).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(reparameterize(mu, Matrix::Zero(1, 8), mu), InputError);

  const int n = 100000;
  Matrix acc = Matrix::Zero(1, 8);
  for (int i = 0; i < n; ++i) acc += reparameterize(mu, sigma, rng.normal_matrix(1, 8));
  acc /= double(n);
  for (Index j = 0; j < 8; ++j) {
    double bound = 3.0 * sigma(0, j) / std::sqrt(double(n));
    CHECK(std::abs(acc(0, j) - mu(0, j)) < bound + 1e-12);
  }

  Tape t(false);
  Matrix eps = rng.normal_matrix(1, 8);
  Matrix zn = t.value(reparameterize_nodes(t, t.input(mu), t.input(sigma), t.input(eps)));
  CHECK((zn - reparameterize(mu, sigma, eps)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("vae training: zero-input KL fixture and memorized singleton") {
  Rng rng(64);
  RunConfig cfg = tiny_vae_config();
  TrajVae vae(cfg, rng);
  NamedParams np;
  vae.collect(np);
  SgdMomentum opt(0.05, 0.9, 1.0);

  {
    // fresh net, zero input: mu = 0 and sigma = 1 make the KL term exactly 0
    TrajVae fresh(cfg, rng);
    NamedParams fnp;
    fresh.collect(fnp);
    SgdMomentum fopt(0.0, 0.0, 1.0);
    Rng step_rng(1);
    VaeLosses l = vae_train_step(fresh, Matrix::Zero(2, fresh.in_dim()), {0, 1}, fopt, fnp,
                                 step_rng, 0.05, 0.1);
    CHECK(l.kl == doctest::Approx(0.0).epsilon(1e-12));
  }

  Rng data_rng(65);
  Trajectory traj = make_class_trajectory(5, cfg.horizon, 0.1, data_rng, 1.0);
  Matrix x(1, vae.in_dim());
  x.row(0) = flatten_displacements(to_displacements(traj));
  Rng step_rng(66);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 400; ++i) {
    VaeLosses l = vae_train_step(vae, x, {3}, opt, np, step_rng, 0.01, 0.1);
    if (i == 0) first = l.recon;
    last = l.recon;
  }
  CHECK(last < 0.5 * first);
  CHECK(last < 0.05);
}

TEST_CASE("uniform logits give cross entropy ln 6") {
  Tape t(true);
  Node logits = t.input(Matrix::Zero(4, 6), true);
  Node ce = cross_entropy_logits(t, logits, {0, 1, 5, 3});
  CHECK(t.value(ce)(0, 0) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("pca fitting: degenerate data, line alignment, full-rank round trip") {
  Rng rng(67);

  std::vector<Trajectory> same(5, Trajectory::Ones(6, 2) * 2.5);
  PcaHead degenerate = fit_pca(same, 2);
  CHECK((degenerate.mu - flatten_traj(same[0])).cwiseAbs().maxCoeff() < 1e-12);

  // trajectories moving along a single direction in flat space
  std::vector<Trajectory> line;
  for (int i = 0; i < 30; ++i) {
    double u = rng.uniform(-2.0, 2.0);
    Trajectory t(2, 2);
    t << u, 2.0 * u, -u, 0.5 * u;
    line.push_back(t);
  }
  PcaHead lh = fit_pca(line, 1);
  RowVector dir(4);
  dir << 1.0, 2.0, -1.0, 0.5;
  dir /= dir.norm();
  double align = std::abs(lh.w.col(0).dot(dir.transpose()));
  CHECK(align == doctest::Approx(1.0).epsilon(1e-6));

  std::vector<Trajectory> rand_trajs;
  for (int i = 0; i < 40; ++i) rand_trajs.push_back(rng.normal_matrix(5, 2));
  PcaHead full = fit_pca(rand_trajs, 10);
  CHECK((full.w.transpose() * full.w - Matrix::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-8);
  for (const auto& tr : rand_trajs) {
    RowVector flat = flatten_traj(tr);
    Matrix y = pca_encode(Matrix(flat), full);
    CHECK((pca_decode(y, full).row(0) - flat).cwiseAbs().maxCoeff() < 1e-8);
  }

  PcaHead again = fit_pca(rand_trajs, 10);
  CHECK((again.w - full.w).cwiseAbs().maxCoeff() == 0.0);  // deterministic incl. signs

  CHECK_THROWS_AS(fit_pca(same, 11), InputError);
}

TEST_CASE("kmeans: planted recovery, determinism, singleton") {
  Rng rng(68);
  std::vector<int> truth;
  std::vector<Trajectory> trajs = planted_clusters(12, 3, 4, rng, &truth);
  Matrix x(Index(trajs.size()), 8);
  for (Index i = 0; i < x.rows(); ++i) x.row(i) = flatten_traj(trajs[std::size_t(i)]);

  KmeansResult a = kmeans(x, 3, 99);
  CHECK(adjusted_rand_index(a.labels, truth) == doctest::Approx(1.0));
  KmeansResult b = kmeans(x, 3, 99);
  CHECK(a.labels == b.labels);
  CHECK((a.centroids - b.centroids).cwiseAbs().maxCoeff() == 0.0);

  Matrix single = rng.normal_matrix(1, 4);
  KmeansResult s = kmeans(single, 1, 5);
  CHECK((s.centroids - single).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adjusted rand index: identity, relabeling, disagreement") {
  std::vector<int> a{0, 0, 1, 1, 2, 2};
  std::vector<int> renamed{2, 2, 0, 0, 1, 1};
  CHECK(adjusted_rand_index(a, a) == doctest::Approx(1.0));
  CHECK(adjusted_rand_index(a, renamed) == doctest::Approx(1.0));
  std::vector<int> other{0, 1, 0, 1, 0, 1};
  CHECK(adjusted_rand_index(a, other) < 0.5);
}

TEST_CASE("dictionary: planted 16-class recovery and bookkeeping") {
  Rng rng(70);
  std::vector<int> truth;
  std::vector<Trajectory> trajs = planted_clusters(10, 16, 6, rng, &truth);

  Dictionary d = build_dictionary(trajs, 16, 16, 7);
  CHECK(d.n_macro() == 16);
  std::vector<int> got;
  for (std::size_t i = 0; i < trajs.size(); ++i)
    got.push_back(d.macro_of_fine[std::size_t(d.fine_of_traj[i])]);
  CHECK(adjusted_rand_index(got, truth) == doctest::Approx(1.0));

  std::size_t total = 0;
  for (const auto& m : d.members) {
    CHECK(!m.empty());
    total += m.size();
  }
  CHECK(total == trajs.size());

  std::vector<Trajectory> rep(3, trajs[0]);
  Dictionary tinyd = build_dictionary(rep, 1, 1, 3);
  CHECK((tinyd.fine_centroids.row(0) -
         Matrix(flatten_traj(trajs[0])).row(0)).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(build_dictionary({}, 1, 1, 0), InputError);
}

TEST_CASE("dictionary json round trip preserves everything") {
  Rng rng(71);
  std::vector<Trajectory> trajs = planted_clusters(6, 4, 5, rng);
  Dictionary d = build_dictionary(trajs, 8, 4, 11);
  Dictionary back = Dictionary::from_json(d.to_json());
  CHECK(back.to_json() == d.to_json());
  CHECK(back.macro_of_fine == d.macro_of_fine);
  CHECK((back.fine_centroids - d.fine_centroids).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("separation metrics: fixtures, brute force agreement, centroid variant") {
  Matrix pts(4, 2);
  pts << 0, 0, 0, 0, 0, 2, 0, 2;
  SeparationReport two = separation_metrics(pts, {0, 0, 1, 1}, 2);
  CHECK(two.intra == 0.0);
  CHECK(two.inter == doctest::Approx(2.0));

  Matrix single(3, 2);
  single << 0, 0, 1, 0, 1, 1;
  SeparationReport small = separation_metrics(single, {0, 1, 1}, 2);
  CHECK(small.small_classes == 1);

  Rng rng(72);
  Matrix rnd = rng.normal_matrix(40, 5);
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(i % 5);
  SeparationReport rep = separation_metrics(rnd, labels, 5);

  // brute force double loops
  double intra = 0.0;
  Matrix cents = Matrix::Zero(5, 5);
  for (int c = 0; c < 5; ++c) {
    double acc = 0.0;
    int m = 0;
    std::vector<int> idx;
    for (int i = 0; i < 40; ++i)
      if (labels[std::size_t(i)] == c) {
        idx.push_back(i);
        cents.row(c) += rnd.row(i);
        m++;
      }
    cents.row(c) /= double(m);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = i + 1; j < idx.size(); ++j)
        acc += (rnd.row(idx[i]) - rnd.row(idx[j])).norm();
    intra += acc / (0.5 * double(m) * double(m - 1));
  }
  intra /= 5.0;
  double inter = 0.0;
  for (int i = 0; i < 5; ++i)
    for (int j = i + 1; j < 5; ++j) inter += (cents.row(i) - cents.row(j)).norm();
  inter /= 10.0;
  CHECK(std::abs(rep.intra - intra) < 1e-9);
  CHECK(std::abs(rep.inter - inter) < 1e-9);
  CHECK(std::abs(rep.ratio - inter / intra) < 1e-9);

  SeparationReport cent = separation_metrics(rnd, labels, 5, true);
  CHECK(cent.intra > 0.0);
  CHECK(cent.intra != doctest::Approx(rep.intra));

  CHECK_THROWS_AS(separation_metrics(rnd, labels, 6), InputError);
}

TEST_CASE("separation ratio formula reproduces the reference measurement") {
  SeparationReport r = make_separation_report(1.48, 34.93);
  CHECK(std::abs(r.ratio - 23.64) <= 0.05);
}

TEST_CASE("vae projection: determinism, translation invariance, frozen gradients") {
  Rng rng(73);
  RunConfig cfg = tiny_vae_config();
  TrajVae vae(cfg, rng);

  Trajectory traj = rng.normal_matrix(cfg.horizon, 2);
  CHECK_THROWS_AS(vae_project(vae, traj), StateError);
  vae.trained = true;

  RowVector z1 = vae_project(vae, traj);
  RowVector z2 = vae_project(vae, traj);
  CHECK((z1 - z2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(z1.size() == 8);

  Trajectory shifted = traj;
  shifted.col(0).array() += 123.0;
  shifted.col(1).array() -= 7.0;
  CHECK((vae_project(vae, shifted) - z1).cwiseAbs().maxCoeff() < 1e-12);

  Param flat(Matrix(flatten_traj(traj)));
  NamedParams np;
  vae.collect(np);
  auto f = [&](bool with_grad) {
    Tape t(with_grad);
    Node x = with_grad ? t.param(flat) : t.input(flat.value);
    Node z = vae_project_nodes(t, vae, x);
    Node loss = sum_sq_scaled(t, z, 1.0);
    double out = t.value(loss)(0, 0);
    if (with_grad) t.backward(loss);
    return out;
  };
  CHECK(grad_check(f, {&flat}, 1e-5) < 1e-4);

  for (auto& [name, p] : np) p->zero_grad();
  f(true);
  for (auto& [name, p] : np) {
    INFO("param ", name);
    CHECK(p->grad.cwiseAbs().maxCoeff() == 0.0);  // weights leased frozen
  }
}
