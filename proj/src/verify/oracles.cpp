#include "gtmm/verify/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace gtmm {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// log N(z; mu, sigma^2) without the shared -0.5 log(2 pi) term
double log_density(double z, double mu, double log_sigma) {
  const double u = (z - mu) / std::exp(log_sigma);
  return -log_sigma - 0.5 * u * u;
}

}  // namespace

SuiteReport kl_oracle_suite(std::uint64_t seed, Index pairs, Index samples) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "KL oracle";
  Rng rng = seeded_rng(seed, "verify-kl", 0);
  constexpr Index K = 2;
  double worst = 0.0, worst_se = 0.0;
  Index worst_pair = 0;
  for (Index p = 0; p < pairs; ++p) {
    Vec<double> mq(K), sq(K), mp(K), sp(K);
    for (Index k = 0; k < K; ++k) {
      mq[k] = rng.uniform(-0.5, 0.5);
      mp[k] = rng.uniform(-0.5, 0.5);
      sq[k] = rng.uniform(-0.35, 0.35);
      sp[k] = rng.uniform(-0.35, 0.35);
    }
    const auto param = [](const Vec<double>& v) { return Tensor<double>::constant({1, K}, v); };
    const double closed =
        gaussian_kl<double>({param(mq), param(sq)}, {param(mp), param(sp)}).item();

    Rng mc = seeded_rng(seed, "verify-kl-samples", static_cast<std::uint64_t>(p));
    double mean = 0.0, m2 = 0.0;
    for (Index n = 1; n <= samples; ++n) {
      double d = 0.0;
      for (Index k = 0; k < K; ++k) {
        const double z = mq[k] + std::exp(sq[k]) * mc.normal();
        d += log_density(z, mq[k], sq[k]) - log_density(z, mp[k], sp[k]);
      }
      const double delta = d - mean;
      mean += delta / static_cast<double>(n);
      m2 += delta * (d - mean);
    }
    const double err = std::abs(mean - closed);
    if (err > worst) {
      worst = err;
      worst_pair = p;
      worst_se = std::sqrt(m2 / static_cast<double>(samples - 1) / static_cast<double>(samples));
    }
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%ld pairs x %ld samples, worst pair %ld (MC standard error %.1e)",
                static_cast<long>(pairs), static_cast<long>(samples), static_cast<long>(worst_pair), worst_se);
  report.checks.push_back({"closed form vs Monte Carlo (nats)", worst, 1e-2, worst < 1e-2, buf});
  report.seconds = seconds_since(t0);
  return report;
}

namespace {

struct ToyParams {
  Index K, F, P, R, Hh;
  const Vec<double>* enc_w;
  const Vec<double>* enc_b;
  const Vec<double>* dec_w;
  const Vec<double>* dec_b;
  const Vec<double>* prior0_w;
  const Vec<double>* prior0_b;
  const Vec<double>* prior1_w;
  const Vec<double>* prior1_b;
  const Vec<double>* post0_w;
  const Vec<double>* post0_b;
  const Vec<double>* post1_w;
  const Vec<double>* post1_b;
  const Vec<double>* gates;
  const Vec<double>* z0;
};

// y = x W + b with W stored row-major [in, out]
std::vector<double> affine(const std::vector<double>& x, const Vec<double>& w, const Vec<double>& b) {
  const Index in = static_cast<Index>(x.size()), out = b.size();
  std::vector<double> y(static_cast<std::size_t>(out));
  for (Index j = 0; j < out; ++j) {
    double acc = b[j];
    for (Index i = 0; i < in; ++i) acc += x[static_cast<std::size_t>(i)] * w[i * out + j];
    y[static_cast<std::size_t>(j)] = acc;
  }
  return y;
}

struct Head {
  std::vector<double> mu, log_sigma;
};

Head head(const std::vector<double>& in, const Vec<double>& w0, const Vec<double>& b0, const Vec<double>& w1,
          const Vec<double>& b1, Index K) {
  const std::vector<double> o = affine(affine(in, w0, b0), w1, b1);
  Head h;
  for (Index k = 0; k < K; ++k) {
    h.mu.push_back(o[static_cast<std::size_t>(k)]);
    h.log_sigma.push_back(std::clamp(o[static_cast<std::size_t>(K + k)], -kLogSigmaBound, kLogSigmaBound));
  }
  return h;
}

double softplus_ref(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

struct ToyStep {
  double kl = 0.0, log_lik = 0.0;
};

// The toy's free energy terms for one sequence, written out as scalar loops.
std::vector<ToyStep> toy_sequence(const ToyParams& p, const std::vector<std::vector<double>>& x,
                                  const std::vector<std::vector<double>>& eps) {
  std::vector<ToyStep> out;
  std::vector<double> z_prev(p.z0->data(), p.z0->data() + p.K);
  for (std::size_t t = 0; t < x.size(); ++t) {
    // memory context: empty buffer at t = 0, then one stored latent that
    // every head reads with weight 1
    std::vector<double> psi(static_cast<std::size_t>(p.R * p.K), 0.0);
    if (t > 0) {
      for (Index r = 0; r < p.R; ++r) {
        for (Index k = 0; k < p.K; ++k) {
          const double g = (*p.gates)[r * p.K + k];
          psi[static_cast<std::size_t>(r * p.K + k)] = z_prev[static_cast<std::size_t>(k)] / (1.0 + std::exp(-g));
        }
      }
    }
    std::vector<double> centered;
    for (double v : x[t]) centered.push_back(2.0 * v - 1.0);
    const std::vector<double> feat = affine(centered, *p.enc_w, *p.enc_b);
    const Head prior = head(psi, *p.prior0_w, *p.prior0_b, *p.prior1_w, *p.prior1_b, p.K);
    std::vector<double> qin = psi;
    qin.insert(qin.end(), feat.begin(), feat.end());
    const Head post = head(qin, *p.post0_w, *p.post0_b, *p.post1_w, *p.post1_b, p.K);

    ToyStep s;
    std::vector<double> z(static_cast<std::size_t>(p.K));
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = post.mu[k] + std::exp(post.log_sigma[k]) * eps[t][k];
      const double vq = std::exp(2.0 * post.log_sigma[k]), vp = std::exp(2.0 * prior.log_sigma[k]);
      const double dm = post.mu[k] - prior.mu[k];
      s.kl += prior.log_sigma[k] - post.log_sigma[k] + (vq + dm * dm) / (2.0 * vp) - 0.5;
    }
    const std::vector<double> logits = affine(z, *p.dec_w, *p.dec_b);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double l = logits[i];
      // log sigmoid(l) = -softplus(-l), log(1 - sigmoid(l)) = -softplus(l)
      s.log_lik -= x[t][i] * softplus_ref(-l) + (1.0 - x[t][i]) * softplus_ref(l);
    }
    out.push_back(s);
    z_prev = z;
  }
  return out;
}

}  // namespace

SuiteReport elbo_oracle_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.name = "ELBO oracle";

  ModelConfig mc;
  mc.memory.kind = MemoryKind::introspection;
  mc.memory.latent = 1;
  mc.memory.hidden = 3;
  mc.memory.heads = 2;
  mc.memory.slots = 2;
  mc.encoder.kind = CodecKind::mlp;
  mc.encoder.image = {1, 1, 2};
  mc.encoder.features = 2;
  mc.encoder.hidden = {};
  mc.head_hidden = 2;
  mc.head_activation = Activation::identity;
  Gtmm<double> model(mc, seed);

  // Spread the parameters out so no term is near zero.
  Rng rng = seeded_rng(seed, "verify-elbo", 0);
  for (const auto& e : model.parameters().entries()) {
    Tensor<double> t = e.tensor;
    for (Index i = 0; i < t.size(); ++i) t.mutable_value()[i] = rng.uniform(-1.0, 1.0);
  }

  const Index B = 3, T = 2, K = 1, P = 2;
  std::vector<Tensor<double>> frames, noise;
  std::vector<std::vector<std::vector<double>>> xs(B), es(B);
  for (Index t = 0; t < T; ++t) {
    Vec<double> f(B * P), e(B * K);
    for (Index i = 0; i < f.size(); ++i) f[i] = rng.uniform();
    for (Index i = 0; i < e.size(); ++i) e[i] = rng.normal();
    for (Index b = 0; b < B; ++b) {
      xs[static_cast<std::size_t>(b)].push_back({f[b * P], f[b * P + 1]});
      es[static_cast<std::size_t>(b)].push_back({e[b]});
    }
    frames.push_back(Tensor<double>::constant({B, P}, f));
    noise.push_back(Tensor<double>::constant({B, K}, e));
  }
  const ElboBreakdown<double> elbo = model.sequence_elbo(frames, {}, noise);

  const auto& ps = model.parameters();
  const auto v = [&](const char* name) { return &ps.get(name).value(); };
  const ToyParams p{K, 2, P, 2, 2,
                    v("encoder.head.weight"), v("encoder.head.bias"),
                    v("decoder.mlp.0.weight"), v("decoder.mlp.0.bias"),
                    v("prior.0.weight"), v("prior.0.bias"), v("prior.1.weight"), v("prior.1.bias"),
                    v("posterior.0.weight"), v("posterior.0.bias"), v("posterior.1.weight"), v("posterior.1.bias"),
                    v("memory.gates"), v("z0")};

  double worst_kl = 0.0, worst_ll = 0.0, worst_total = 0.0, sum_total = 0.0;
  for (Index b = 0; b < B; ++b) {
    const auto steps = toy_sequence(p, xs[static_cast<std::size_t>(b)], es[static_cast<std::size_t>(b)]);
    double total = 0.0;
    for (Index t = 0; t < T; ++t) {
      const auto& rec = elbo.per_step[static_cast<std::size_t>(t)];
      const auto& s = steps[static_cast<std::size_t>(t)];
      worst_kl = std::max(worst_kl, std::abs(rec.kl.value()[b] - s.kl));
      worst_ll = std::max(worst_ll, std::abs(rec.log_lik.value()[b] - s.log_lik));
      total += s.log_lik - s.kl;
    }
    worst_total = std::max(worst_total, std::abs(elbo.total.value()[b] - total));
    sum_total += total;
  }
  const double loss_err = std::abs(elbo.loss.item() - (-sum_total / static_cast<double>(T * B)));
  constexpr double limit = 1e-10;
  report.checks.push_back({"per-step KL", worst_kl, limit, worst_kl < limit, ""});
  report.checks.push_back({"per-step log-likelihood", worst_ll, limit, worst_ll < limit, ""});
  report.checks.push_back({"per-sequence ELBO", worst_total, limit, worst_total < limit, ""});
  report.checks.push_back({"batch loss", loss_err, limit, loss_err < limit, ""});
  report.seconds = seconds_since(t0);
  return report;
}

}  // namespace gtmm
