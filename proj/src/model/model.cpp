#include "gtmm/model/model.hpp"

#include <stdexcept>

namespace gtmm {

template <typename S>
Tensor<S> reparameterize(const GaussianParams<S>& params, const Tensor<S>& eps) {
  if (eps.shape() != params.mu.shape()) {
    throw ShapeError("reparameterize: eps " + to_string(eps.shape()) + " vs mu " + to_string(params.mu.shape()));
  }
  return add(params.mu, mul(exp(params.log_sigma), eps));
}

template <typename S>
Tensor<S> gaussian_kl(const GaussianParams<S>& q, const GaussianParams<S>& p) {
  if (q.mu.shape() != p.mu.shape() || q.log_sigma.shape() != p.log_sigma.shape()) {
    throw ShapeError("gaussian_kl: q " + to_string(q.mu.shape()) + " vs p " + to_string(p.mu.shape()));
  }
  const Tensor<S> var_q = exp(scale(q.log_sigma, S(2)));
  const Tensor<S> inv_var_p = exp(scale(p.log_sigma, S(-2)));
  const Tensor<S> ratio = mul(add(var_q, square(sub(q.mu, p.mu))), inv_var_p);
  const Tensor<S> per_dim = add_scalar(add(sub(p.log_sigma, q.log_sigma), scale(ratio, S(0.5))), S(-0.5));
  return sum(per_dim, -1);
}

template <typename S>
Tensor<S> bernoulli_log_lik(const Tensor<S>& logits, const Tensor<S>& x) {
  if (logits.shape() != x.shape()) {
    throw ShapeError("bernoulli_log_lik: logits " + to_string(logits.shape()) + " vs x " + to_string(x.shape()));
  }
  if ((x.value() < S(0)).any() || (x.value() > S(1)).any()) {
    throw std::invalid_argument("bernoulli_log_lik: targets must lie in [0, 1]");
  }
  return sum(sub(mul(x, logits), softplus(logits)), -1);
}

void ModelConfig::validate() const {
  memory.validate();
  encoder.validate();
  if (head_hidden < 1) throw std::invalid_argument("ModelConfig: head width must be positive");
  if (memory.kind == MemoryKind::vrnn && memory.features != encoder.features) {
    throw std::invalid_argument("ModelConfig: vrnn feature width must equal the encoder width");
  }
}

namespace {

DecoderSpec decoder_spec(const ModelConfig& c) {
  DecoderSpec d;
  d.mirror = c.encoder;
  d.latent = c.latent();
  d.extra = c.memory.kind == MemoryKind::vrnn ? c.memory.psi_width() : 0;
  return d;
}

}  // namespace

template <typename S>
Gtmm<S>::Gtmm(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng = seeded_rng(init_seed, "init", 0);
  const Index K = config_.latent(), psi = config_.memory.psi_width();
  encoder_ = Encoder<S>(store_, "encoder", config_.encoder, rng);
  decoder_ = Decoder<S>(store_, "decoder", decoder_spec(config_), rng);
  memory_ = MemorySystem<S>(store_, "memory", config_.memory, rng);
  const std::vector<Activation> acts{config_.head_activation, Activation::identity};
  prior_ = Mlp<S>(store_, "prior", MlpSpec{psi, {config_.head_hidden, 2 * K}, acts}, rng);
  if (!config_.tie_posterior) {
    posterior_ = Mlp<S>(store_, "posterior",
                        MlpSpec{psi + config_.encoder.features, {config_.head_hidden, 2 * K}, acts}, rng);
  }
  z0_ = store_.add("z0", {K}, Vec<S>::Zero(K));
}

template <typename S>
Rollout<S> Gtmm<S>::start(Index batch) const {
  Rollout<S> r;
  r.memory = memory_.initial(batch);
  r.z_prev = add(Tensor<S>::zeros({batch, config_.latent()}), z0_);
  r.features_prev = Tensor<S>::zeros({batch, config_.encoder.features});
  r.first = true;
  return r;
}

template <typename S>
Tensor<S> Gtmm<S>::features(const Tensor<S>& x) const {
  return encoder_(add_scalar(scale(x, S(2)), S(-1)));
}

template <typename S>
GaussianParams<S> Gtmm<S>::split_head(const Tensor<S>& out) const {
  const Index K = config_.latent();
  const S bound = static_cast<S>(kLogSigmaBound);
  return {slice(out, 1, 0, K), clamp(slice(out, 1, K, K), -bound, bound)};
}

template <typename S>
GaussianParams<S> Gtmm<S>::prior_params(const Tensor<S>& psi) const {
  return split_head(prior_(psi));
}

template <typename S>
GaussianParams<S> Gtmm<S>::posterior_params(const Tensor<S>& psi, const Tensor<S>& feats) const {
  if (config_.tie_posterior) return prior_params(psi);
  return split_head(posterior_(concat<S>({psi, feats}, 1)));
}

template <typename S>
Tensor<S> Gtmm<S>::decode(const Tensor<S>& z, const Tensor<S>& psi) const {
  return config_.memory.kind == MemoryKind::vrnn ? decoder_(z, psi) : decoder_(z);
}

template <typename S>
MemoryStep<S> Gtmm<S>::context_step(const Rollout<S>& carry, const Tensor<S>& context) const {
  MemoryInput<S> in;
  in.z_prev = carry.z_prev;
  in.x_features = carry.features_prev;
  in.context = context;
  in.write = !carry.first;
  return memory_.step(carry.memory, in);
}

template <typename S>
void Gtmm<S>::advance(Rollout<S>& carry, MemoryState<S> memory, const Tensor<S>& z, const Tensor<S>& feats) const {
  carry.memory = std::move(memory);
  carry.z_prev = z;
  carry.features_prev = feats;
  carry.first = false;
}

template <typename S>
StepRecord<S> Gtmm<S>::infer_step(Rollout<S>& carry, const Tensor<S>& x, const Tensor<S>& context,
                                  const Tensor<S>& eps) const {
  MemoryStep<S> ms = context_step(carry, context);
  StepRecord<S> rec;
  rec.prior = prior_params(ms.psi);
  const Tensor<S> feats = features(x);
  rec.posterior = config_.tie_posterior ? rec.prior : posterior_params(ms.psi, feats);
  rec.z = reparameterize(rec.posterior, eps);
  rec.logits = decode(rec.z, ms.psi);
  rec.log_lik = bernoulli_log_lik(rec.logits, x);
  rec.kl = gaussian_kl(rec.posterior, rec.prior);
  advance(carry, std::move(ms.state), rec.z, feats);
  return rec;
}

template <typename S>
ElboBreakdown<S> Gtmm<S>::sequence_elbo(const std::vector<Tensor<S>>& frames, const std::vector<Tensor<S>>& contexts,
                                        const std::vector<Tensor<S>>& noise) const {
  if (frames.empty()) throw std::invalid_argument("sequence_elbo: empty sequence");
  if (noise.size() != frames.size()) throw std::invalid_argument("sequence_elbo: need one noise tensor per frame");
  if (!contexts.empty() && contexts.size() != frames.size()) {
    throw std::invalid_argument("sequence_elbo: need one context per frame");
  }
  if (config_.memory.context > 0 && contexts.empty()) {
    throw std::invalid_argument("sequence_elbo: this model expects action context");
  }
  const Index B = frames.front().dim(0);
  const Index T = static_cast<Index>(frames.size());
  ElboBreakdown<S> out;
  out.T = T;
  Rollout<S> carry = start(B);
  for (std::size_t t = 0; t < frames.size(); ++t) {
    StepRecord<S> rec = infer_step(carry, frames[t], contexts.empty() ? Tensor<S>() : contexts[t], noise[t]);
    const Tensor<S> f = sub(rec.log_lik, rec.kl);
    out.total = t == 0 ? f : add(out.total, f);
    out.per_step.push_back(std::move(rec));
  }
  out.loss = scale(sum(out.total), S(-1) / static_cast<S>(T * B));
  return out;
}

template <typename S>
Generation<S> Gtmm<S>::generate(const std::vector<Tensor<S>>& contexts, const std::vector<Tensor<S>>& noise,
                                const std::vector<Tensor<S>>& prefix) const {
  if (noise.empty()) throw std::invalid_argument("generate: need at least one step");
  if (!contexts.empty() && contexts.size() != noise.size()) {
    throw std::invalid_argument("generate: action count " + std::to_string(contexts.size()) +
                                " does not match length " + std::to_string(noise.size()));
  }
  if (config_.memory.context > 0 && contexts.empty()) {
    throw std::invalid_argument("generate: this model expects action context");
  }
  if (prefix.size() > noise.size()) throw std::invalid_argument("generate: prefix longer than the sequence");
  const Index B = noise.front().dim(0);
  const bool vrnn = config_.memory.kind == MemoryKind::vrnn;
  Generation<S> out;
  Rollout<S> carry = start(B);
  for (std::size_t t = 0; t < noise.size(); ++t) {
    MemoryStep<S> ms = context_step(carry, contexts.empty() ? Tensor<S>() : contexts[t]);
    Tensor<S> z, feats;
    if (t < prefix.size()) {
      feats = features(prefix[t]);
      z = reparameterize(posterior_params(ms.psi, feats), noise[t]);
    } else {
      z = reparameterize(prior_params(ms.psi), noise[t]);
    }
    const Tensor<S> mean = sigmoid(decode(z, ms.psi));
    if (!feats.defined()) feats = vrnn ? features(mean) : carry.features_prev;
    advance(carry, std::move(ms.state), z, feats);
    out.means.push_back(mean.detach());
    out.z.push_back(z.detach());
  }
  return out;
}

template <typename S>
std::vector<Tensor<S>> sample_noise(std::uint64_t seed, std::string_view label,
                                    const std::vector<std::uint64_t>& sample_ids, Index T, Index K) {
  const Index B = static_cast<Index>(sample_ids.size());
  std::vector<Vec<S>> values(static_cast<std::size_t>(T), Vec<S>(B * K));
  for (Index b = 0; b < B; ++b) {
    Rng rng = seeded_rng(seed, label, sample_ids[static_cast<std::size_t>(b)]);
    for (Index t = 0; t < T; ++t) {
      for (Index k = 0; k < K; ++k) values[static_cast<std::size_t>(t)][b * K + k] = static_cast<S>(rng.normal());
    }
  }
  std::vector<Tensor<S>> out;
  out.reserve(values.size());
  for (auto& v : values) out.push_back(Tensor<S>::constant({B, K}, std::move(v)));
  return out;
}

#define GTMM_INSTANTIATE(S)                                                                                \
  template Tensor<S> reparameterize<S>(const GaussianParams<S>&, const Tensor<S>&);                        \
  template Tensor<S> gaussian_kl<S>(const GaussianParams<S>&, const GaussianParams<S>&);                   \
  template Tensor<S> bernoulli_log_lik<S>(const Tensor<S>&, const Tensor<S>&);                             \
  template class Gtmm<S>;                                                                                  \
  template std::vector<Tensor<S>> sample_noise<S>(std::uint64_t, std::string_view,                         \
                                                  const std::vector<std::uint64_t>&, Index, Index);

GTMM_INSTANTIATE(float)
GTMM_INSTANTIATE(double)
#undef GTMM_INSTANTIATE

}  // namespace gtmm
