#pragma once

#include <limits>
#include <string>

#include "misty/manifold.hpp"
#include "misty/planner.hpp"

namespace misty {

// Latent sample sets for one training step. z_fake rows carry gradient in
// the tape; the matrices here are plain values.
struct DriftBatch {
  Matrix z_fake;  // K x latent
  Matrix z_cond;  // P x latent, compliant alternatives of the scenario
  Matrix z_unc;   // U x latent, dictionary draws
  double temperature = 1.0;
};

// Per-dimension standardization statistics of the union of sample sets.
struct NormStats {
  RowVector mean;
  RowVector std;  // floored at 1e-6
};

NormStats union_stats(const DriftBatch& batch);

// (x - mean) / std, per dimension. Stats enter as constants; gradient
// through the node form reaches x only.
Matrix apply_norm(const Matrix& x, const NormStats& st);
Node apply_norm_node(Tape& t, Node x, const NormStats& st);

// Standardizes all three sets in place; returns the stats used.
NormStats normalize_features(DriftBatch& batch);

// Euclidean distance matrix, n x m.
Matrix pairwise_distances(const Matrix& a, const Matrix& b);

// (row-softmax + column-softmax of -d/temperature) / 2.
Matrix bidirectional_softmax(const Matrix& d, double temperature);

// Attraction toward `targets` minus repulsion from `peers`. Peers must be
// the z_from set itself; self-pairs are removed from the peer kernel before
// normalization, and a single row has no peers at all.
Matrix drift_vectors(const Matrix& z_from, const Matrix& targets, const Matrix& peers,
                     double temperature);

// V_unc + alpha * (V_cond - V_unc); exact at alpha = 0 and alpha = 1.
Matrix interpolate_guidance(const Matrix& v_cond, const Matrix& v_unc, double alpha);

// Global rescale so the mean row norm equals c, then per-row cap at c_max.
Matrix magnitude_normalize(const Matrix& v, double c = 1.0, double c_max = 5.0);

struct DriftField {
  Matrix v_cond, v_unc, v_total, v_bar;
};

// Fields of an already-normalized batch.
DriftField compute_drift_field(const DriftBatch& batch, double alpha, double c, double c_max);

// (1/K) sum_k |z_k - sg(z_k + vbar_k)|^2 with the target detached: the
// value reduces to (1/K) sum |vbar_k|^2 and the gradient into z_fake is
// -(2/K) vbar.
Node drift_loss(Tape& t, Node z_fake, const Matrix& v_bar);

struct DriftStepReport {
  int step = 0;
  double loss = 0.0;
  double alpha = 0.0;
  double mean_field_norm = 0.0;  // mean row norm of v_bar
  double grad_norm = 0.0;
  double wall_ms = 0.0;
  bool skipped = false;

  std::string jsonl() const;  // one line, newline-terminated
};

// One optimizer update of the planner's encoder and decoder on a single
// scenario: sample alpha, generate negatives, project everything into the
// frozen VAE latent space, drift, backprop, step. Scenarios without
// compliant alternatives are skipped with a warning on stderr.
//
// `corpus_trajs` must be the trajectory list the dictionary was built from;
// unconditional samples are member draws, cfg.unc_per_class per macro class.
// A finite `fixed_alpha` overrides the uniform draw.
DriftStepReport drift_training_step(
    Planner& planner, const Scenario& scenario, const TrajVae& vae, const Dictionary& dict,
    const std::vector<Trajectory>& corpus_trajs, SgdMomentum& opt, const NamedParams& params,
    Rng& rng, int step_index,
    double fixed_alpha = std::numeric_limits<double>::quiet_NaN());

}  // namespace misty
