#include "misty/manifold.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace misty {

Matrix to_displacements(const Trajectory& traj) {
  if (traj.rows() < 2) throw InputError("to_displacements: need at least 2 waypoints");
  Matrix d(traj.rows() - 1, 2);
  for (Index t = 0; t < d.rows(); ++t) d.row(t) = traj.row(t + 1) - traj.row(t);
  return d;
}

Trajectory from_displacements(const Matrix& deltas, const Point2& start) {
  Trajectory t(deltas.rows() + 1, 2);
  t(0, 0) = start.x();
  t(0, 1) = start.y();
  for (Index i = 0; i < deltas.rows(); ++i) t.row(i + 1) = t.row(i) + deltas.row(i);
  return t;
}

RowVector flatten_displacements(const Matrix& deltas) {
  RowVector flat(deltas.rows() * 2);
  for (Index i = 0; i < deltas.rows(); ++i) {
    flat(2 * i) = deltas(i, 0);
    flat(2 * i + 1) = deltas(i, 1);
  }
  return flat;
}

Node displacement_rows(Tape& t, Node flat_traj) {
  const Index w = t.value(flat_traj).cols();
  if (w < 4 || w % 2 != 0) throw DimensionError("displacement_rows: bad flat width");
  return sub(t, slice_cols(t, flat_traj, 2, w - 2), slice_cols(t, flat_traj, 0, w - 2));
}

TrajVae::TrajVae(const RunConfig& cfg, Rng& rng)
    : in_dim_(2 * (cfg.horizon - 1)), hidden_(cfg.vae_hidden), latent_(cfg.latent) {
  in_proj_ = MlpStack({in_dim_, hidden_}, {false}, {false}, rng);
  for (int i = 0; i < cfg.vae_blocks; ++i)
    enc_blocks_.emplace_back(std::vector<Index>{hidden_, hidden_, hidden_},
                             std::vector<bool>{true, false}, std::vector<bool>{true, false}, rng);
  mu_head_ = MlpStack({hidden_, latent_}, {false}, {false}, rng);
  logvar_head_ = MlpStack({hidden_, latent_}, {false}, {false}, rng);
  dec_in_ = MlpStack({latent_, hidden_}, {false}, {false}, rng);
  for (int i = 0; i < cfg.vae_blocks; ++i)
    dec_blocks_.emplace_back(std::vector<Index>{hidden_, hidden_, hidden_},
                             std::vector<bool>{true, false}, std::vector<bool>{true, false}, rng);
  dec_out_ = MlpStack({hidden_, in_dim_}, {false}, {false}, rng);
  classifier_ = MlpStack({latent_, 6}, {false}, {false}, rng);
}

namespace {

Node res_stack(Tape& t, Node h, const std::vector<MlpStack>& blocks, bool trainable) {
  for (const auto& blk : blocks)
    h = add(t, h, trainable ? blk.forward(t, h) : blk.forward_frozen(t, h));
  return h;
}

}  // namespace

std::pair<Node, Node> TrajVae::encode_nodes(Tape& t, Node x, bool trainable) const {
  if (t.value(x).cols() != in_dim_) throw DimensionError("vae_encode: input width mismatch");
  Node h = trainable ? in_proj_.forward(t, x) : in_proj_.forward_frozen(t, x);
  h = res_stack(t, h, enc_blocks_, trainable);
  Node mu = trainable ? mu_head_.forward(t, h) : mu_head_.forward_frozen(t, h);
  Node logvar = trainable ? logvar_head_.forward(t, h) : logvar_head_.forward_frozen(t, h);
  return {mu, clamp(t, logvar, -10.0, 10.0)};
}

Node TrajVae::decode_nodes(Tape& t, Node z, bool trainable) const {
  Node h = trainable ? dec_in_.forward(t, z) : dec_in_.forward_frozen(t, z);
  h = res_stack(t, h, dec_blocks_, trainable);
  return trainable ? dec_out_.forward(t, h) : dec_out_.forward_frozen(t, h);
}

Node TrajVae::classify_nodes(Tape& t, Node z, bool trainable) const {
  return trainable ? classifier_.forward(t, z) : classifier_.forward_frozen(t, z);
}

void TrajVae::encode_plain(const Matrix& x, Matrix& mu, Matrix& sigma) const {
  Matrix h = in_proj_.forward_plain(x);
  for (const auto& blk : enc_blocks_) h += blk.forward_plain(h);
  mu = mu_head_.forward_plain(h);
  Matrix logvar = logvar_head_.forward_plain(h).array().max(-10.0).min(10.0).matrix();
  sigma = (logvar * 0.5).array().exp().matrix();
}

Matrix TrajVae::decode_plain(const Matrix& z) const {
  Matrix h = dec_in_.forward_plain(z);
  for (const auto& blk : dec_blocks_) h += blk.forward_plain(h);
  return dec_out_.forward_plain(h);
}

void TrajVae::collect(NamedParams& out) {
  in_proj_.collect("vae/in", out);
  for (std::size_t i = 0; i < enc_blocks_.size(); ++i)
    enc_blocks_[i].collect("vae/enc" + std::to_string(i), out);
  mu_head_.collect("vae/mu", out);
  logvar_head_.collect("vae/logvar", out);
  dec_in_.collect("vae/dec_in", out);
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i)
    dec_blocks_[i].collect("vae/dec" + std::to_string(i), out);
  dec_out_.collect("vae/dec_out", out);
  classifier_.collect("vae/cls", out);
}

Matrix reparameterize(const Matrix& mu, const Matrix& sigma, const Matrix& eps) {
  if (sigma.minCoeff() <= 0.0) throw InputError("reparameterize: sigma must be positive");
  return mu + eps.cwiseProduct(sigma);
}

Node reparameterize_nodes(Tape& t, Node mu, Node sigma, Node eps) {
  return add(t, mu, hadamard(t, eps, sigma));
}

VaeLosses vae_train_step(TrajVae& vae, const Matrix& batch, const std::vector<int>& tags,
                         SgdMomentum& opt, const NamedParams& params, Rng& rng, double beta,
                         double lambda) {
  if (batch.rows() < 1) throw InputError("vae_train_step: empty batch");
  if (Index(tags.size()) != batch.rows()) throw InputError("vae_train_step: tag count mismatch");
  const Index B = batch.rows();

  Tape t(true);
  Node x = t.input(batch);
  auto [mu, logvar] = vae.encode_nodes(t, x, true);
  Node sigma = exp_elem(t, scale(t, logvar, 0.5));
  Node eps = t.constant(rng.normal_matrix(B, vae.latent_dim()));
  Node z = reparameterize_nodes(t, mu, sigma, eps);

  Node recon = mse(t, vae.decode_nodes(t, z, true), x);
  // 0.5 sum(mu^2 + exp(logvar) - logvar - 1), averaged over the batch
  Node kl = scale(t,
                  sum_all(t, sub(t, add(t, square(t, mu), exp_elem(t, logvar)),
                                 add_scalar(t, logvar, 1.0))),
                  0.5 / double(B));
  Node aux = cross_entropy_logits(t, vae.classify_nodes(t, z, true), tags);
  Node total = add(t, recon, add(t, scale(t, kl, beta), scale(t, aux, lambda)));

  VaeLosses out;
  out.recon = t.value(recon)(0, 0);
  out.kl = t.value(kl)(0, 0);
  out.aux = t.value(aux)(0, 0);
  out.total = t.value(total)(0, 0);
  if (!std::isfinite(out.total)) throw TrainingError("vae_train_step: non-finite loss");

  opt.zero_grad(params);
  t.backward(total);
  opt.step(params);
  return out;
}

RowVector vae_project(const TrajVae& vae, const Trajectory& traj) {
  if (!vae.trained) throw StateError("vae_project: encoder not trained");
  Matrix mu, sigma;
  vae.encode_plain(Matrix(flatten_displacements(to_displacements(traj))), mu, sigma);
  return mu.row(0);
}

Node vae_project_nodes(Tape& t, const TrajVae& vae, Node flat_traj) {
  if (!vae.trained) throw StateError("vae_project: encoder not trained");
  Node d = displacement_rows(t, flat_traj);
  return vae.encode_nodes(t, d, false).first;
}

PcaHead fit_pca(const std::vector<Trajectory>& trajs, Index d) {
  if (trajs.empty()) throw InputError("fit_pca: empty input");
  const Index n = Index(trajs.size());
  const Index w = trajs[0].rows() * 2;
  if (n < d) throw InputError("fit_pca: fewer samples than components");
  Matrix x(n, w);
  for (Index i = 0; i < n; ++i) x.row(i) = flatten_traj(trajs[std::size_t(i)]);

  PcaHead head;
  head.mu = x.colwise().mean();
  Matrix centered = x.rowwise() - head.mu;
  Matrix cov = (centered.transpose() * centered) / double(n);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  if (eig.info() != Eigen::Success) throw TrainingError("fit_pca: eigensolver failed");

  head.w.resize(w, d);
  for (Index j = 0; j < d; ++j) {
    Vector col = eig.eigenvectors().col(w - 1 - j);  // descending variance
    Index imax = 0;
    col.cwiseAbs().maxCoeff(&imax);
    if (col(imax) < 0.0) col = -col;
    head.w.col(j) = col;
  }
  head.fitted = true;
  return head;
}

Matrix pca_encode(const Matrix& flat_rows, const PcaHead& head) {
  if (!head.fitted) throw StateError("pca_encode: head not fitted");
  return (flat_rows.rowwise() - head.mu) * head.w;
}

KmeansResult kmeans(const Matrix& x, int k, std::uint64_t seed, int max_iters) {
  const Index n = x.rows();
  if (n == 0) throw InputError("kmeans: empty input");
  if (k < 1 || Index(k) > n) throw InputError("kmeans: k out of range");
  Rng rng(seed);

  KmeansResult res;
  res.centroids.resize(k, x.cols());
  res.labels.assign(std::size_t(n), 0);

  // k-means++ seeding
  Index first = Index(rng.uniform_int(0, int(n - 1)));
  res.centroids.row(0) = x.row(first);
  Vector d2 = (x.rowwise() - res.centroids.row(0)).rowwise().squaredNorm();
  for (int c = 1; c < k; ++c) {
    double total = d2.sum();
    Index pick = 0;
    if (total > 0.0) {
      double r = rng.uniform(0.0, total);
      double acc = 0.0;
      for (Index i = 0; i < n; ++i) {
        acc += d2(i);
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = Index(rng.uniform_int(0, int(n - 1)));
    }
    res.centroids.row(c) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - res.centroids.row(c)).rowwise().squaredNorm());
  }

  std::vector<int> prev(std::size_t(n), -1);
  for (res.iters = 0; res.iters < max_iters; ++res.iters) {
    // assignment, ties to the lowest centroid index
    for (Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        double d = (x.row(i) - res.centroids.row(c)).squaredNorm();
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      res.labels[std::size_t(i)] = arg;
    }
    if (res.labels == prev) break;
    prev = res.labels;

    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<int> counts(std::size_t(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(res.labels[std::size_t(i)]) += x.row(i);
      counts[std::size_t(res.labels[std::size_t(i)])]++;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[std::size_t(c)] > 0) {
        res.centroids.row(c) = sums.row(c) / double(counts[std::size_t(c)]);
      } else {
        // reseed an empty cluster with the point farthest from its centroid
        double worst = -1.0;
        Index far = 0;
        for (Index i = 0; i < n; ++i) {
          double d = (x.row(i) - res.centroids.row(res.labels[std::size_t(i)])).squaredNorm();
          if (d > worst) {
            worst = d;
            far = i;
          }
        }
        res.centroids.row(c) = x.row(far);
      }
    }
  }
  return res;
}

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw InputError("ari: label size mismatch");
  int ka = *std::max_element(a.begin(), a.end()) + 1;
  int kb = *std::max_element(b.begin(), b.end()) + 1;
  Matrix table = Matrix::Zero(ka, kb);
  for (std::size_t i = 0; i < a.size(); ++i) table(a[i], b[i]) += 1.0;

  auto comb2 = [](double m) { return m * (m - 1.0) / 2.0; };
  double sum_ij = 0.0;
  for (Index i = 0; i < table.rows(); ++i)
    for (Index j = 0; j < table.cols(); ++j) sum_ij += comb2(table(i, j));
  double sum_a = 0.0, sum_b = 0.0;
  for (Index i = 0; i < table.rows(); ++i) sum_a += comb2(table.row(i).sum());
  for (Index j = 0; j < table.cols(); ++j) sum_b += comb2(table.col(j).sum());
  double expected = sum_a * sum_b / comb2(double(a.size()));
  double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (sum_ij - expected) / (max_index - expected);
}

Dictionary build_dictionary(const std::vector<Trajectory>& trajs, int n_fine, int n_macro,
                            std::uint64_t seed) {
  if (trajs.empty()) throw InputError("build_dictionary: empty input");
  if (n_fine < n_macro || Index(n_fine) > Index(trajs.size()))
    throw InputError("build_dictionary: need |trajs| >= n_fine >= n_macro");
  Matrix x(Index(trajs.size()), trajs[0].rows() * 2);
  for (Index i = 0; i < x.rows(); ++i) x.row(i) = flatten_traj(trajs[std::size_t(i)]);

  KmeansResult fine = kmeans(x, n_fine, seed);
  KmeansResult macro = kmeans(fine.centroids, n_macro, seed + 1);

  Dictionary d;
  d.seed = seed;
  d.fine_centroids = fine.centroids;
  d.macro_of_fine = macro.labels;
  d.macro_centroids = macro.centroids;
  d.fine_of_traj = fine.labels;
  d.members.assign(std::size_t(n_macro), {});
  for (std::size_t i = 0; i < trajs.size(); ++i)
    d.members[std::size_t(d.macro_of_fine[std::size_t(fine.labels[i])])].push_back(int(i));
  return d;
}

SeparationReport make_separation_report(double intra, double inter) {
  SeparationReport r;
  r.intra = intra;
  r.inter = inter;
  r.ratio = intra > 0.0 ? inter / intra : 0.0;
  return r;
}

SeparationReport separation_metrics(const Matrix& points, const std::vector<int>& labels,
                                    int n_classes, bool to_centroid) {
  if (Index(labels.size()) != points.rows())
    throw InputError("separation_metrics: label count mismatch");
  if (n_classes < 2) throw InputError("separation_metrics: need at least 2 classes");

  std::vector<std::vector<Index>> by_class;
  by_class.resize(std::size_t(n_classes));
  for (Index i = 0; i < points.rows(); ++i) {
    int c = labels[std::size_t(i)];
    if (c < 0 || c >= n_classes) throw InputError("separation_metrics: label out of range");
    by_class[std::size_t(c)].push_back(i);
  }
  for (int c = 0; c < n_classes; ++c)
    if (by_class[std::size_t(c)].empty())
      throw InputError("separation_metrics: class " + std::to_string(c) + " is empty");

  Matrix centroids = Matrix::Zero(n_classes, points.cols());
  for (int c = 0; c < n_classes; ++c) {
    for (Index i : by_class[std::size_t(c)]) centroids.row(c) += points.row(i);
    centroids.row(c) /= double(by_class[std::size_t(c)].size());
  }

  SeparationReport r;
  double intra_sum = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    const auto& idx = by_class[std::size_t(c)];
    const std::size_t m = idx.size();
    if (m < 2 && !to_centroid) {
      std::fprintf(stderr, "separation_metrics: class %d has %zu member(s), intra = 0\n", c, m);
      r.small_classes++;
      continue;
    }
    Matrix sub(Index(m), points.cols());
    for (std::size_t i = 0; i < m; ++i) sub.row(Index(i)) = points.row(idx[i]);
    if (to_centroid) {
      intra_sum += (sub.rowwise() - centroids.row(c)).rowwise().norm().mean();
    } else {
      Matrix gram = sub * sub.transpose();
      Vector sq = gram.diagonal();
      double acc = 0.0;
      for (Index i = 0; i < sub.rows(); ++i)
        for (Index j = i + 1; j < sub.rows(); ++j)
          acc += std::sqrt(std::max(0.0, sq(i) + sq(j) - 2.0 * gram(i, j)));
      intra_sum += acc / (0.5 * double(m) * double(m - 1));
    }
  }
  r.intra = intra_sum / double(n_classes);

  double inter_acc = 0.0;
  for (int i = 0; i < n_classes; ++i)
    for (int j = i + 1; j < n_classes; ++j)
      inter_acc += (centroids.row(i) - centroids.row(j)).norm();
  r.inter = inter_acc / (0.5 * double(n_classes) * double(n_classes - 1));
  r.ratio = r.intra > 0.0 ? r.inter / r.intra : 0.0;
  return r;
}

std::string Dictionary::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = schema_version;
  j["seed"] = seed;
  auto mat = [](const Matrix& m) {
    auto arr = nlohmann::ordered_json::array();
    for (Index i = 0; i < m.rows(); ++i) {
      auto row = nlohmann::ordered_json::array();
      for (Index c = 0; c < m.cols(); ++c) row.push_back(m(i, c));
      arr.push_back(std::move(row));
    }
    return arr;
  };
  j["fine_centroids"] = mat(fine_centroids);
  j["macro_of_fine"] = macro_of_fine;
  j["macro_centroids"] = mat(macro_centroids);
  j["fine_of_traj"] = fine_of_traj;
  j["members"] = members;
  return j.dump() + "\n";
}

Dictionary Dictionary::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dictionary parse: ") + e.what());
  }
  Dictionary d;
  try {
    d.schema_version = j.at("schema_version").get<int>();
    d.seed = j.at("seed").get<std::uint64_t>();
    auto mat = [](const nlohmann::json& arr) {
      Matrix m(Index(arr.size()), arr.empty() ? 0 : Index(arr[0].size()));
      for (Index i = 0; i < m.rows(); ++i)
        for (Index c = 0; c < m.cols(); ++c) m(i, c) = arr[i][c].get<double>();
      return m;
    };
    d.fine_centroids = mat(j.at("fine_centroids"));
    d.macro_of_fine = j.at("macro_of_fine").get<std::vector<int>>();
    d.macro_centroids = mat(j.at("macro_centroids"));
    d.fine_of_traj = j.at("fine_of_traj").get<std::vector<int>>();
    d.members = j.at("members").get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dictionary field: ") + e.what());
  }
  return d;
}

Dictionary Dictionary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("dictionary load: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void Dictionary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("dictionary save: cannot open " + path);
  out << to_json();
  if (!out) throw IoError("dictionary save: write failed " + path);
}

}  // namespace misty
