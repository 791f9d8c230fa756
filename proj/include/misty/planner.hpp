#pragma once

#include <string>
#include <vector>

#include "misty/checkpoint.hpp"
#include "misty/decoder.hpp"
#include "misty/manifold.hpp"

namespace misty {

// Output of one generation call: latent coordinates and the decoded
// trajectories, plus everything needed to reproduce the call.
struct ProposalSet {
  int schema_version = 1;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  int nfe = 1;  // sequential decoder evaluations spent on this set
  Matrix latents;                        // K x d_pca
  std::vector<Trajectory> trajectories;  // K entries, H x 2 each

  int k() const { return int(trajectories.size()); }

  std::string to_json() const;
  static ProposalSet from_json(const std::string& text);
  static ProposalSet load(const std::string& path);
  void save(const std::string& path) const;
};

// Scene encoder + guidance-conditioned decoder + frozen trajectory basis.
// Generation is a single decoder pass over K noise rows; the iterative
// variant exists purely as a latency baseline.
class Planner {
 public:
  Planner() = default;
  explicit Planner(const RunConfig& cfg);

  // Ego-frame scene tokens without tape bookkeeping.
  void encode_tokens(const Scenario& s, Matrix& agent, Matrix& map) const;

  ProposalSet generate(const Scenario& s, int k, double alpha, std::uint64_t seed) const;

  // `steps` chained decoder passes re-mixing the noise between passes.
  // Same per-pass arithmetic as generate; reports nfe = steps.
  ProposalSet generate_iterative(const Scenario& s, int k, double alpha, std::uint64_t seed,
                                 int steps) const;

  // Decoder+basis pass on pre-encoded tokens; the benchmarked inner loop.
  Matrix decode_latents(const Matrix& noise, const Matrix& agent, const Matrix& map,
                        double alpha) const;

  int last_nfe() const { return last_nfe_; }

  SceneEncoder& encoder() { return encoder_; }
  const SceneEncoder& encoder() const { return encoder_; }
  Decoder& decoder() { return decoder_; }
  const Decoder& decoder() const { return decoder_; }
  PcaHead& pca() { return pca_; }
  const PcaHead& pca() const { return pca_; }
  const RunConfig& config() const { return cfg_; }

  // Encoder and decoder parameters; the PCA basis is not trainable.
  void collect(NamedParams& out);

  void save(const std::string& path) const;
  // Refuses checkpoints whose embedded config hash differs from cfg.hash().
  static Planner load(const std::string& path, const RunConfig& cfg);

 private:
  RunConfig cfg_;
  SceneEncoder encoder_;
  Decoder decoder_;
  PcaHead pca_;
  mutable int last_nfe_ = 0;
};

}  // namespace misty
