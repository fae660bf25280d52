#include "gtmm/nets/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace gtmm {

template <typename S>
Tensor<S> activate(const Tensor<S>& x, Activation act) {
  switch (act) {
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
    case Activation::identity: break;
  }
  return x;
}

template <typename S>
Vec<S> uniform_init(Rng& rng, Index count, Index fan_in, double scale) {
  const double bound = scale / std::sqrt(static_cast<double>(fan_in));
  Vec<S> v(count);
  for (Index i = 0; i < count; ++i) v[i] = static_cast<S>(rng.uniform(-bound, bound));
  return v;
}

// ---------------------------------------------------------------------------

template <typename S>
Linear<S>::Linear(ParameterStore<S>& store, const std::string& name, Index in, Index out, Rng& rng, double scale)
    : in_(in), out_(out) {
  if (in < 1 || out < 1) throw std::invalid_argument("Linear " + name + ": widths must be positive");
  weight_ = store.add(name + ".weight", {in, out}, uniform_init<S>(rng, in * out, in, scale));
  bias_ = store.add(name + ".bias", {out}, uniform_init<S>(rng, out, in, scale));
}

template <typename S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) const {
  if (x.dim(-1) != in_) {
    throw ShapeError("Linear: expected input width " + std::to_string(in_) + ", got shape " + to_string(x.shape()));
  }
  return add(matmul(x, weight_), bias_);
}

void MlpSpec::validate() const {
  if (input < 1) throw std::invalid_argument("MlpSpec: input width must be positive");
  if (widths.empty()) throw std::invalid_argument("MlpSpec: at least one layer required");
  if (widths.size() != activations.size()) throw std::invalid_argument("MlpSpec: one activation per layer");
  for (Index w : widths) {
    if (w < 1) throw std::invalid_argument("MlpSpec: widths must be positive");
  }
}

template <typename S>
Mlp<S>::Mlp(ParameterStore<S>& store, const std::string& name, MlpSpec spec, Rng& rng) : spec_(std::move(spec)) {
  spec_.validate();
  Index in = spec_.input;
  for (std::size_t i = 0; i < spec_.widths.size(); ++i) {
    layers_.emplace_back(store, name + "." + std::to_string(i), in, spec_.widths[i], rng, spec_.init_scale);
    in = spec_.widths[i];
  }
}

template <typename S>
Tensor<S> Mlp<S>::operator()(const Tensor<S>& x) const {
  Tensor<S> y = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) y = activate(layers_[i](y), spec_.activations[i]);
  return y;
}

// ---------------------------------------------------------------------------

template <typename S>
Lstm<S>::Lstm(ParameterStore<S>& store, const std::string& name, Index input, Index hidden, Rng& rng,
              double forget_bias)
    : input_(input), hidden_(hidden) {
  if (input < 1 || hidden < 1) throw std::invalid_argument("Lstm " + name + ": widths must be positive");
  const Index fan_in = input + hidden;
  weight_ = store.add(name + ".weight", {fan_in, 4 * hidden}, uniform_init<S>(rng, fan_in * 4 * hidden, fan_in));
  Vec<S> b = uniform_init<S>(rng, 4 * hidden, fan_in);
  b.segment(hidden, hidden).setConstant(static_cast<S>(forget_bias));
  bias_ = store.add(name + ".bias", {4 * hidden}, std::move(b));
}

template <typename S>
LstmState<S> Lstm<S>::initial(Index batch) const {
  return {Tensor<S>::zeros({batch, hidden_}), Tensor<S>::zeros({batch, hidden_})};
}

template <typename S>
LstmState<S> Lstm<S>::step(const LstmState<S>& state, const Tensor<S>& input) const {
  if (input.rank() != 2 || input.dim(1) != input_) {
    throw ShapeError("Lstm: expected input [B, " + std::to_string(input_) + "], got " + to_string(input.shape()));
  }
  if (state.h.dim(0) != input.dim(0) || state.h.dim(1) != hidden_) {
    throw ShapeError("Lstm: state " + to_string(state.h.shape()) + " does not match input " +
                     to_string(input.shape()));
  }
  const Tensor<S> gates = add(matmul(concat<S>({input, state.h}, 1), weight_), bias_);
  const Tensor<S> i = sigmoid(slice(gates, 1, 0, hidden_));
  const Tensor<S> f = sigmoid(slice(gates, 1, hidden_, hidden_));
  const Tensor<S> g = tanh(slice(gates, 1, 2 * hidden_, hidden_));
  const Tensor<S> o = sigmoid(slice(gates, 1, 3 * hidden_, hidden_));
  LstmState<S> next;
  next.c = add(mul(f, state.c), mul(i, g));
  next.h = mul(o, tanh(next.c));
  return next;
}

// ---------------------------------------------------------------------------

namespace {

Index conv_out(Index size, const ConvLayerSpec& l) {
  return (size + 2 * l.padding - l.kernel) / l.stride + 1;
}

}  // namespace

void EncoderSpec::validate() const {
  if (image.channels < 1 || image.height < 1 || image.width < 1) {
    throw std::invalid_argument("EncoderSpec: image dims must be positive");
  }
  if (features < 1) throw std::invalid_argument("EncoderSpec: feature width must be positive");
  if (kind == CodecKind::small_conv) {
    if (conv.empty()) throw std::invalid_argument("EncoderSpec: small-conv needs at least one conv layer");
    Index h = image.height, w = image.width;
    for (const auto& l : conv) {
      if (l.channels < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) {
        throw std::invalid_argument("EncoderSpec: invalid conv layer");
      }
      if (h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel) {
        throw std::invalid_argument("EncoderSpec: conv kernel larger than feature map");
      }
      h = conv_out(h, l);
      w = conv_out(w, l);
    }
  }
}

void DecoderSpec::validate() const {
  mirror.validate();
  if (latent < 1 || extra < 0) throw std::invalid_argument("DecoderSpec: latent width must be positive");
}

template <typename S>
Encoder<S>::Encoder(ParameterStore<S>& store, const std::string& name, EncoderSpec spec, Rng& rng)
    : spec_(std::move(spec)) {
  spec_.validate();
  Index flat = spec_.image.pixels();
  if (spec_.kind == CodecKind::small_conv) {
    Index c = spec_.image.channels, h = spec_.image.height, w = spec_.image.width;
    for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
      const auto& l = spec_.conv[i];
      const Index fan_in = c * l.kernel * l.kernel;
      const std::string prefix = name + ".conv" + std::to_string(i);
      conv_weight_.push_back(store.add(prefix + ".weight", {l.channels, c, l.kernel, l.kernel},
                                       uniform_init<S>(rng, l.channels * fan_in, fan_in)));
      conv_bias_.push_back(store.add(prefix + ".bias", {l.channels}, uniform_init<S>(rng, l.channels, fan_in)));
      c = l.channels;
      h = conv_out(h, l);
      w = conv_out(w, l);
    }
    flat = c * h * w;
  } else if (!spec_.hidden.empty()) {
    MlpSpec m{flat, spec_.hidden, std::vector<Activation>(spec_.hidden.size(), Activation::relu)};
    mlp_ = Mlp<S>(store, name + ".mlp", m, rng);
    flat = spec_.hidden.back();
  }
  head_ = Linear<S>(store, name + ".head", flat, spec_.features, rng);
}

template <typename S>
Tensor<S> Encoder<S>::operator()(const Tensor<S>& x) const {
  const auto& img = spec_.image;
  if (x.rank() != 2 || x.dim(1) != img.pixels()) {
    throw ShapeError("Encoder: expected [B, " + std::to_string(img.pixels()) + "], got " + to_string(x.shape()));
  }
  const Index batch = x.dim(0);
  if (spec_.kind == CodecKind::mlp) return head_(spec_.hidden.empty() ? x : mlp_(x));
  Tensor<S> y = reshape(x, {batch, img.channels, img.height, img.width});
  for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
    const auto& l = spec_.conv[i];
    y = relu(conv2d(y, conv_weight_[i], conv_bias_[i], {l.stride, l.padding}));
  }
  return head_(reshape(y, {batch, -1}));
}

template <typename S>
Decoder<S>::Decoder(ParameterStore<S>& store, const std::string& name, DecoderSpec spec, Rng& rng)
    : spec_(std::move(spec)) {
  spec_.validate();
  const auto& enc = spec_.mirror;
  const Index input = spec_.latent + spec_.extra;
  if (enc.kind == CodecKind::mlp) {
    std::vector<Index> widths = enc.hidden;
    std::vector<Activation> acts(widths.size(), Activation::relu);
    widths.push_back(enc.image.pixels());
    acts.push_back(Activation::identity);
    mlp_ = Mlp<S>(store, name + ".mlp", MlpSpec{input, widths, acts}, rng);
    return;
  }
  // Walk the encoder geometry forward, then mirror it with transposed convs
  // whose kernels are chosen so each stage lands exactly on the encoder size.
  std::vector<Index> ch{enc.image.channels}, hs{enc.image.height}, ws{enc.image.width};
  for (const auto& l : enc.conv) {
    ch.push_back(l.channels);
    hs.push_back(conv_out(hs.back(), l));
    ws.push_back(conv_out(ws.back(), l));
  }
  const std::size_t n = enc.conv.size();
  stem_channels_ = ch[n];
  stem_h_ = hs[n];
  stem_w_ = ws[n];
  stem_ = Linear<S>(store, name + ".stem", input, stem_channels_ * stem_h_ * stem_w_, rng);
  for (std::size_t k = n; k-- > 0;) {
    const auto& l = enc.conv[k];
    Stage s{ch[k + 1], ch[k], hs[k + 1], ws[k + 1], hs[k], ws[k], 0, 0, l.stride, l.padding};
    s.kernel_h = s.out_h - l.stride * (s.in_h - 1) + 2 * l.padding;
    s.kernel_w = s.out_w - l.stride * (s.in_w - 1) + 2 * l.padding;
    if (s.kernel_h < 1 || s.kernel_w < 1) {
      throw std::invalid_argument("DecoderSpec: cannot mirror encoder stage " + std::to_string(k));
    }
    const Index fan_in = s.in_channels * s.kernel_h * s.kernel_w;
    const std::string prefix = name + ".deconv" + std::to_string(stages_.size());
    weight_.push_back(store.add(prefix + ".weight", {s.in_channels, s.out_channels, s.kernel_h, s.kernel_w},
                                uniform_init<S>(rng, fan_in * s.out_channels, fan_in)));
    bias_.push_back(store.add(prefix + ".bias", {s.out_channels}, uniform_init<S>(rng, s.out_channels, fan_in)));
    stages_.push_back(s);
  }
}

template <typename S>
Tensor<S> Decoder<S>::operator()(const Tensor<S>& z, const Tensor<S>& extra) const {
  if (z.rank() != 2 || z.dim(1) != spec_.latent) {
    throw ShapeError("Decoder: expected z [B, " + std::to_string(spec_.latent) + "], got " + to_string(z.shape()));
  }
  Tensor<S> input = z;
  if (spec_.extra > 0) {
    if (!extra.defined() || extra.rank() != 2 || extra.dim(1) != spec_.extra || extra.dim(0) != z.dim(0)) {
      throw ShapeError("Decoder: expected extra [B, " + std::to_string(spec_.extra) + "]");
    }
    input = concat<S>({z, extra}, 1);
  } else if (extra.defined()) {
    throw ShapeError("Decoder: configured without an extra input");
  }
  const Index batch = z.dim(0);
  if (spec_.mirror.kind == CodecKind::mlp) return mlp_(input);
  Tensor<S> y = reshape(relu(stem_(input)), {batch, stem_channels_, stem_h_, stem_w_});
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    y = conv_transpose2d(y, weight_[i], bias_[i], {stages_[i].stride, stages_[i].padding});
    if (i + 1 < stages_.size()) y = relu(y);
  }
  return reshape(y, {batch, -1});
}

#define GTMM_INSTANTIATE(S)                                              \
  template Tensor<S> activate<S>(const Tensor<S>&, Activation);          \
  template Vec<S> uniform_init<S>(Rng&, Index, Index, double);           \
  template class Linear<S>;                                              \
  template class Mlp<S>;                                                 \
  template class Lstm<S>;                                                \
  template class Encoder<S>;                                             \
  template class Decoder<S>;

GTMM_INSTANTIATE(float)
GTMM_INSTANTIATE(double)
#undef GTMM_INSTANTIATE

}  // namespace gtmm
