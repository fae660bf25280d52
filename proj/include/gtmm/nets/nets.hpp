#pragma once

// Feedforward, recurrent, and image codec blocks. Each block registers its
// parameters in a ParameterStore under a dotted name prefix and is a pure
// function of (inputs, parameter values).

#include "gtmm/harness/rng.hpp"
#include "gtmm/tensor/ops.hpp"
#include "gtmm/tensor/parameters.hpp"

#include <string>
#include <vector>

namespace gtmm {

enum class Activation { identity, tanh, relu };

template <typename S>
Tensor<S> activate(const Tensor<S>& x, Activation act);

/// Uniform(-s, s) with s = scale / sqrt(fan_in).
template <typename S>
Vec<S> uniform_init(Rng& rng, Index count, Index fan_in, double scale = 1.0);

template <typename S>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<S>& store, const std::string& name, Index in, Index out, Rng& rng, double scale = 1.0);

  /// x: [..., in] -> [..., out]
  Tensor<S> operator()(const Tensor<S>& x) const;

  Index in() const { return in_; }
  Index out() const { return out_; }
  const Tensor<S>& weight() const { return weight_; }
  const Tensor<S>& bias() const { return bias_; }

 private:
  Index in_ = 0;
  Index out_ = 0;
  Tensor<S> weight_;  // [in, out]
  Tensor<S> bias_;    // [out]
};

struct MlpSpec {
  Index input = 0;
  std::vector<Index> widths;            // one entry per layer
  std::vector<Activation> activations;  // same length as widths
  double init_scale = 1.0;

  void validate() const;
  Index output() const { return widths.back(); }
};

template <typename S>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore<S>& store, const std::string& name, MlpSpec spec, Rng& rng);

  Tensor<S> operator()(const Tensor<S>& x) const;

  const MlpSpec& spec() const { return spec_; }
  const std::vector<Linear<S>>& layers() const { return layers_; }

 private:
  MlpSpec spec_;
  std::vector<Linear<S>> layers_;
};

template <typename S>
struct LstmState {
  Tensor<S> h;  // [B, H]
  Tensor<S> c;  // [B, H]
};

/// Standard LSTM cell with gates ordered (input, forget, candidate, output)
/// and one fused weight over concat(input, h).
template <typename S>
class Lstm {
 public:
  Lstm() = default;
  Lstm(ParameterStore<S>& store, const std::string& name, Index input, Index hidden, Rng& rng,
       double forget_bias = 1.0);

  LstmState<S> initial(Index batch) const;
  LstmState<S> step(const LstmState<S>& state, const Tensor<S>& input) const;

  Index input() const { return input_; }
  Index hidden() const { return hidden_; }
  const Tensor<S>& weight() const { return weight_; }
  const Tensor<S>& bias() const { return bias_; }

 private:
  Index input_ = 0;
  Index hidden_ = 0;
  Tensor<S> weight_;  // [input + hidden, 4 hidden]
  Tensor<S> bias_;    // [4 hidden]
};

struct ImageDims {
  Index channels = 1;
  Index height = 8;
  Index width = 8;

  Index pixels() const { return channels * height * width; }
  bool operator==(const ImageDims&) const = default;
};

struct ConvLayerSpec {
  Index channels = 8;
  Index kernel = 3;
  Index stride = 2;
  Index padding = 1;
};

enum class CodecKind { mlp, small_conv };

struct EncoderSpec {
  CodecKind kind = CodecKind::small_conv;
  ImageDims image;
  Index features = 64;
  std::vector<ConvLayerSpec> conv{{8, 3, 2, 1}, {16, 3, 2, 1}};
  std::vector<Index> hidden{128};  // mlp kind only; empty means a single linear map

  void validate() const;
};

struct DecoderSpec {
  EncoderSpec mirror;  // decoder output dims equal mirror.image
  Index latent = 8;
  Index extra = 0;     // width of the optional conditioning vector

  void validate() const;
};

/// Image [B, C*H*W] -> features [B, F]; the last layer is linear with no
/// activation.
template <typename S>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParameterStore<S>& store, const std::string& name, EncoderSpec spec, Rng& rng);

  Tensor<S> operator()(const Tensor<S>& x) const;
  const EncoderSpec& spec() const { return spec_; }

 private:
  EncoderSpec spec_;
  std::vector<Tensor<S>> conv_weight_;
  std::vector<Tensor<S>> conv_bias_;
  Mlp<S> mlp_;
  Linear<S> head_;
};

/// (z [B, K], extra [B, E] or undefined) -> Bernoulli logits [B, C*H*W].
template <typename S>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParameterStore<S>& store, const std::string& name, DecoderSpec spec, Rng& rng);

  Tensor<S> operator()(const Tensor<S>& z, const Tensor<S>& extra = {}) const;
  const DecoderSpec& spec() const { return spec_; }

 private:
  struct Stage {
    Index in_channels, out_channels;
    Index in_h, in_w, out_h, out_w;
    Index kernel_h, kernel_w, stride, padding;
  };

  DecoderSpec spec_;
  Linear<S> stem_;
  Index stem_channels_ = 0, stem_h_ = 0, stem_w_ = 0;
  std::vector<Stage> stages_;
  std::vector<Tensor<S>> weight_;
  std::vector<Tensor<S>> bias_;
  Mlp<S> mlp_;
};

}  // namespace gtmm
