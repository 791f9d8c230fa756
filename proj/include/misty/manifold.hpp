#pragma once

#include <string>
#include <utility>
#include <vector>

#include "misty/corpus.hpp"
#include "misty/decoder.hpp"

namespace misty {

// Per-step displacements of a trajectory, (H-1) x 2.
Matrix to_displacements(const Trajectory& traj);
Trajectory from_displacements(const Matrix& deltas, const Point2& start);

// Interleaved [dx0, dy0, dx1, ...] row, length 2(H-1).
RowVector flatten_displacements(const Matrix& deltas);

// Displacement transform on flattened trajectory rows (K x 2H -> K x 2(H-1)),
// differentiable; first delta is p1 - p0.
Node displacement_rows(Tape& t, Node flat_traj);

// Residual-MLP VAE over flattened displacement sequences with a Gaussian
// latent (width cfg.latent) and a 6-way auxiliary intent classifier.
class TrajVae {
 public:
  TrajVae() = default;
  TrajVae(const RunConfig& cfg, Rng& rng);

  Index in_dim() const { return in_dim_; }
  Index latent_dim() const { return latent_; }

  // mu and clamped log-variance, rows aligned with x.
  std::pair<Node, Node> encode_nodes(Tape& t, Node x, bool trainable) const;
  Node decode_nodes(Tape& t, Node z, bool trainable) const;
  Node classify_nodes(Tape& t, Node z, bool trainable) const;

  void encode_plain(const Matrix& x, Matrix& mu, Matrix& sigma) const;
  Matrix decode_plain(const Matrix& z) const;

  void collect(NamedParams& out);

  bool trained = false;

 private:
  Index in_dim_ = 0, hidden_ = 0, latent_ = 0;
  MlpStack in_proj_, mu_head_, logvar_head_;
  std::vector<MlpStack> enc_blocks_;
  MlpStack dec_in_, dec_out_;
  std::vector<MlpStack> dec_blocks_;
  MlpStack classifier_;
};

// z = mu + eps (.) sigma.
Matrix reparameterize(const Matrix& mu, const Matrix& sigma, const Matrix& eps);
Node reparameterize_nodes(Tape& t, Node mu, Node sigma, Node eps);

struct VaeLosses {
  double recon = 0.0, kl = 0.0, aux = 0.0, total = 0.0;
};

// One optimizer step on a batch of flattened displacement rows with 6-class
// tags. beta and lambda weight the KL and classification terms.
VaeLosses vae_train_step(TrajVae& vae, const Matrix& batch, const std::vector<int>& tags,
                         SgdMomentum& opt, const NamedParams& params, Rng& rng, double beta,
                         double lambda);

// Deterministic mean-latent projection through the frozen encoder.
RowVector vae_project(const TrajVae& vae, const Trajectory& traj);
// Batched node form: flat_traj is K x 2H decoded trajectories; grads flow to
// the input rows only (weights are leased frozen).
Node vae_project_nodes(Tape& t, const TrajVae& vae, Node flat_traj);

// PCA over flattened trajectories; columns carry a deterministic sign
// (largest-magnitude entry positive).
PcaHead fit_pca(const std::vector<Trajectory>& trajs, Index d);
Matrix pca_encode(const Matrix& flat_rows, const PcaHead& head);

struct KmeansResult {
  Matrix centroids;         // k x D
  std::vector<int> labels;  // one per input row
  int iters = 0;
};

// Seeded k-means++ plus Lloyd iterations; deterministic given (x, k, seed).
KmeansResult kmeans(const Matrix& x, int k, std::uint64_t seed, int max_iters = 100);

double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b);

// Two-stage behavior dictionary: fine k-means over physical waypoints, then
// k-means over the fine centroids into n_macro classes.
struct Dictionary {
  int schema_version = 1;
  std::uint64_t seed = 0;
  Matrix fine_centroids;               // n_fine x 2H
  std::vector<int> macro_of_fine;      // n_fine
  Matrix macro_centroids;              // n_macro x 2H
  std::vector<int> fine_of_traj;       // per input trajectory
  std::vector<std::vector<int>> members;  // per macro class: input indices

  int n_macro() const { return int(macro_centroids.rows()); }

  std::string to_json() const;
  static Dictionary from_json(const std::string& text);
  static Dictionary load(const std::string& path);
  void save(const std::string& path) const;
};

Dictionary build_dictionary(const std::vector<Trajectory>& trajs, int n_fine, int n_macro,
                            std::uint64_t seed);

struct SeparationReport {
  double intra = 0.0;
  double inter = 0.0;
  double ratio = 0.0;
  int small_classes = 0;  // classes with < 2 members (contribute 0 intra)
};

SeparationReport make_separation_report(double intra, double inter);

// intra: mean over classes of mean pairwise distance inside the class
// (or mean distance to the class centroid when to_centroid is set);
// inter: mean pairwise distance between class centroids.
SeparationReport separation_metrics(const Matrix& points, const std::vector<int>& labels,
                                    int n_classes, bool to_centroid = false);

}  // namespace misty
