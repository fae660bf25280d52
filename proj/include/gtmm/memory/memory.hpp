#pragma once

// External memory systems behind one batched step interface:
//
//   step(state, {z_prev, x_features, context, write}) -> (psi, state)
//
// psi conditions the prior and posterior at the current step and depends
// only on what was stored before it. All tensors carry a leading batch dim B.

#include "gtmm/nets/nets.hpp"

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace gtmm {

enum class MemoryKind { vrnn, introspection, ntm, lru, dnc };

std::string to_string(MemoryKind kind);
MemoryKind parse_memory_kind(const std::string& name);

struct MemoryConfig {
  MemoryKind kind = MemoryKind::introspection;
  Index latent = 8;     // K
  Index context = 0;    // action width, 0 when the task has none
  Index features = 64;  // encoder width fed to the vrnn transition
  Index hidden = 64;    // controller H
  Index heads = 5;      // R
  Index slots = 15;     // L
  Index word = 0;       // W for content systems; 0 means W = K
  double usage_decay = 0.95;
  double gate_init = 2.0;

  Index word_width() const { return word > 0 ? word : latent; }
  Index psi_width() const;
  void validate() const;
};

template <typename S>
struct MemoryInput {
  Tensor<S> z_prev;      // [B, K]
  Tensor<S> x_features;  // [B, F], vrnn only
  Tensor<S> context;     // [B, C] or undefined
  bool write = true;     // false at the first step, when z_prev is the learned z0
};

template <typename S>
struct IntrospectionState {
  LstmState<S> controller;
  std::vector<Tensor<S>> rows;  // L slots of [B, K]; [0, fill) are written
  Index fill = 0;
  Index cursor = 0;
  Tensor<S> read_weights;       // [B, R, fill], undefined while empty

  /// Written rows stacked to [B, fill, K].
  Tensor<S> buffer() const;
};

template <typename S>
struct NtmState {
  LstmState<S> controller;
  Tensor<S> memory;         // [B, L, W]
  Tensor<S> read_weights;   // [B, R, L]
  Tensor<S> write_weights;  // [B, L]
  Tensor<S> reads;          // [B, R * W]
};

template <typename S>
struct LruState {
  LstmState<S> controller;
  Tensor<S> memory;         // [B, L, W]
  Tensor<S> usage;          // [B, L], raw decayed mass
  Tensor<S> read_weights;   // [B, R, L]
  Tensor<S> write_weights;  // [B, L]
  Tensor<S> reads;          // [B, R * W]
};

template <typename S>
struct DncState {
  LstmState<S> controller;
  Tensor<S> memory;         // [B, L, W]
  Tensor<S> usage;          // [B, L]
  Tensor<S> precedence;     // [B, L]
  Tensor<S> links;          // [B, L, L]; links[i, j]: i written right after j
  Tensor<S> read_weights;   // [B, R, L]
  Tensor<S> write_weights;  // [B, L]
  Tensor<S> reads;          // [B, R * W]
};

template <typename S>
struct VrnnState {
  LstmState<S> controller;
};

template <typename S>
using MemoryState = std::variant<VrnnState<S>, IntrospectionState<S>, NtmState<S>, LruState<S>, DncState<S>>;

template <typename S>
struct MemoryStep {
  Tensor<S> psi;  // [B, psi_width]
  MemoryState<S> state;
};

// Addressing helpers, exposed for testing.

/// softmax(beta * cos(M_i, key)) over rows. memory [B, L, W], keys [B, R, W],
/// beta [B, R] -> [B, R, L].
template <typename S>
Tensor<S> content_attention(const Tensor<S>& memory, const Tensor<S>& keys, const Tensor<S>& beta);

/// Circular convolution of w [B, R, L] with a distribution over shifts
/// {-1, 0, +1} given as [B, R, 3]. Shift +1 moves mass from slot i to i + 1.
template <typename S>
Tensor<S> circular_shift(const Tensor<S>& weights, const Tensor<S>& shift);

/// w^gamma / sum(w^gamma), gamma [B, R] >= 1.
template <typename S>
Tensor<S> sharpen(const Tensor<S>& weights, const Tensor<S>& gamma);

/// links [B, L, L], write [B, L], precedence [B, L] (before this write).
template <typename S>
Tensor<S> update_links(const Tensor<S>& links, const Tensor<S>& write, const Tensor<S>& precedence);

template <typename S>
Tensor<S> update_precedence(const Tensor<S>& precedence, const Tensor<S>& write);

/// weights [B, R, L] -> retrieved rows [B, R, W].
template <typename S>
Tensor<S> read_memory(const Tensor<S>& memory, const Tensor<S>& weights);

/// M * (1 - w e^T) + w a^T with w [B, L], erase and add [B, W].
template <typename S>
Tensor<S> erase_and_add(const Tensor<S>& memory, const Tensor<S>& write, const Tensor<S>& erase,
                        const Tensor<S>& add);

template <typename S>
class MemorySystem {
 public:
  MemorySystem() = default;
  MemorySystem(ParameterStore<S>& store, const std::string& name, MemoryConfig config, Rng& rng);

  MemoryState<S> initial(Index batch) const;
  MemoryStep<S> step(const MemoryState<S>& state, const MemoryInput<S>& input) const;

  const MemoryConfig& config() const { return config_; }
  Index psi_width() const { return config_.psi_width(); }

 private:
  MemoryStep<S> step_vrnn(const VrnnState<S>& s, const MemoryInput<S>& in) const;
  MemoryStep<S> step_introspection(const IntrospectionState<S>& s, const MemoryInput<S>& in) const;
  MemoryStep<S> step_ntm(const NtmState<S>& s, const MemoryInput<S>& in) const;
  MemoryStep<S> step_lru(const LruState<S>& s, const MemoryInput<S>& in) const;
  MemoryStep<S> step_dnc(const DncState<S>& s, const MemoryInput<S>& in) const;

  Tensor<S> controller_input(const MemoryInput<S>& in, const Tensor<S>& extra) const;
  void check_input(const MemoryInput<S>& in, Index batch) const;

  MemoryConfig config_;
  Lstm<S> controller_;
  Mlp<S> scorer_;       // introspection: h -> R * L softplus scores
  Tensor<S> gates_;     // introspection: [R, K]
  Linear<S> interface_; // content systems: concat(z_prev, h) -> head parameters
};

}  // namespace gtmm
