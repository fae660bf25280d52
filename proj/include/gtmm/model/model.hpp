#pragma once

// Temporal VAE with a memory-conditioned prior and filtering posterior.
// Everything is batched over a leading dim B; per-sample quantities (KL,
// log-likelihood, totals) are [B] tensors so batch order never mixes samples.

#include "gtmm/memory/memory.hpp"

#include <cstdint>
#include <vector>

namespace gtmm {

inline constexpr double kLogSigmaBound = 7.0;

template <typename S>
struct GaussianParams {
  Tensor<S> mu;         // [B, K]
  Tensor<S> log_sigma;  // [B, K], clamped to +-kLogSigmaBound
};

/// z = mu + exp(log_sigma) * eps
template <typename S>
Tensor<S> reparameterize(const GaussianParams<S>& params, const Tensor<S>& eps);

/// KL(q || p) per sample, [B].
template <typename S>
Tensor<S> gaussian_kl(const GaussianParams<S>& q, const GaussianParams<S>& p);

/// sum over pixels of x log sigmoid(l) + (1 - x) log(1 - sigmoid(l)), [B].
/// Throws std::invalid_argument when x leaves [0, 1].
template <typename S>
Tensor<S> bernoulli_log_lik(const Tensor<S>& logits, const Tensor<S>& x);

struct ModelConfig {
  MemoryConfig memory;
  EncoderSpec encoder;
  Index head_hidden = 64;
  Activation head_activation = Activation::tanh;
  bool tie_posterior = false;  // posterior := prior, so every KL is exactly 0

  Index latent() const { return memory.latent; }
  Index pixels() const { return encoder.image.pixels(); }
  void validate() const;
};

template <typename S>
struct StepRecord {
  Tensor<S> z;        // [B, K]
  Tensor<S> kl;       // [B]
  Tensor<S> log_lik;  // [B]
  Tensor<S> logits;   // [B, P]
  GaussianParams<S> prior;
  GaussianParams<S> posterior;
};

template <typename S>
struct ElboBreakdown {
  Tensor<S> total;  // [B], sum over t of log_lik - kl
  std::vector<StepRecord<S>> per_step;
  Index T = 0;
  Tensor<S> loss;   // scalar, -sum(total) / (T * B)
};

/// Everything carried from one step to the next.
template <typename S>
struct Rollout {
  MemoryState<S> memory;
  Tensor<S> z_prev;         // [B, K]; the learned z0 at the first step
  Tensor<S> features_prev;  // [B, F]; zeros at the first step
  bool first = true;
};

template <typename S>
struct Generation {
  std::vector<Tensor<S>> means;  // T of [B, P], in [0, 1]
  std::vector<Tensor<S>> z;      // T of [B, K]
};

template <typename S>
class Gtmm {
 public:
  Gtmm(ModelConfig config, std::uint64_t init_seed);

  Gtmm(const Gtmm&) = delete;
  Gtmm& operator=(const Gtmm&) = delete;
  Gtmm(Gtmm&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterStore<S>& parameters() { return store_; }
  const ParameterStore<S>& parameters() const { return store_; }

  Rollout<S> start(Index batch) const;

  /// Encoder features of images in [0, 1] (rescaled to [-1, 1] first).
  Tensor<S> features(const Tensor<S>& x) const;
  GaussianParams<S> prior_params(const Tensor<S>& psi) const;
  GaussianParams<S> posterior_params(const Tensor<S>& psi, const Tensor<S>& features) const;
  /// Decoder logits; the vrnn variant also conditions on psi.
  Tensor<S> decode(const Tensor<S>& z, const Tensor<S>& psi) const;

  /// Memory context for the coming step, before any observation.
  MemoryStep<S> context_step(const Rollout<S>& carry, const Tensor<S>& context) const;

  StepRecord<S> infer_step(Rollout<S>& carry, const Tensor<S>& x, const Tensor<S>& context,
                           const Tensor<S>& eps) const;

  /// frames: T of [B, P]; contexts: empty or T of [B, C]; noise: T of [B, K].
  ElboBreakdown<S> sequence_elbo(const std::vector<Tensor<S>>& frames, const std::vector<Tensor<S>>& contexts,
                                 const std::vector<Tensor<S>>& noise) const;

  /// Prior rollout of noise.size() steps. The first prefix.size() steps are
  /// teacher-forced: z comes from the posterior given the prefix frame.
  Generation<S> generate(const std::vector<Tensor<S>>& contexts, const std::vector<Tensor<S>>& noise,
                         const std::vector<Tensor<S>>& prefix = {}) const;

 private:
  GaussianParams<S> split_head(const Tensor<S>& out) const;
  void advance(Rollout<S>& carry, MemoryState<S> memory, const Tensor<S>& z, const Tensor<S>& features) const;

  ModelConfig config_;
  ParameterStore<S> store_;
  Encoder<S> encoder_;
  Decoder<S> decoder_;
  MemorySystem<S> memory_;
  Mlp<S> prior_;
  Mlp<S> posterior_;
  Tensor<S> z0_;
};

/// Per-sample standard normal noise: sample b of the batch draws T * K
/// values from seeded_rng(seed, label, sample_ids[b]). Returns T of [B, K].
template <typename S>
std::vector<Tensor<S>> sample_noise(std::uint64_t seed, std::string_view label,
                                    const std::vector<std::uint64_t>& sample_ids, Index T, Index K);

}  // namespace gtmm
