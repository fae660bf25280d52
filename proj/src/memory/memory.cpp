#include "gtmm/memory/memory.hpp"

#include <algorithm>
#include <stdexcept>

namespace gtmm {

std::string to_string(MemoryKind kind) {
  switch (kind) {
    case MemoryKind::vrnn: return "vrnn";
    case MemoryKind::introspection: return "introspection";
    case MemoryKind::ntm: return "ntm";
    case MemoryKind::lru: return "lru";
    case MemoryKind::dnc: return "dnc";
  }
  return "unknown";
}

MemoryKind parse_memory_kind(const std::string& name) {
  for (MemoryKind k : {MemoryKind::vrnn, MemoryKind::introspection, MemoryKind::ntm, MemoryKind::lru,
                       MemoryKind::dnc}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown model kind '" + name + "' (vrnn, introspection, ntm, lru, dnc)");
}

Index MemoryConfig::psi_width() const {
  switch (kind) {
    case MemoryKind::vrnn: return hidden;
    case MemoryKind::introspection: return heads * latent;
    default: return heads * word_width() + hidden;
  }
}

void MemoryConfig::validate() const {
  if (latent < 1 || hidden < 1 || heads < 1 || slots < 1) {
    throw std::invalid_argument("MemoryConfig: latent, hidden, heads and slots must be positive");
  }
  if (context < 0 || word < 0) throw std::invalid_argument("MemoryConfig: negative width");
  if (kind == MemoryKind::vrnn && features < 1) throw std::invalid_argument("MemoryConfig: vrnn needs features");
  if (!(usage_decay >= 0.0 && usage_decay < 1.0)) {
    throw std::invalid_argument("MemoryConfig: usage decay must lie in [0, 1)");
  }
}

template <typename S>
Tensor<S> IntrospectionState<S>::buffer() const {
  if (fill == 0) throw std::logic_error("introspection buffer is empty");
  std::vector<Tensor<S>> parts;
  parts.reserve(static_cast<std::size_t>(fill));
  for (Index i = 0; i < fill; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    parts.push_back(reshape(r, {r.dim(0), 1, r.dim(1)}));
  }
  return concat(parts, 1);
}

// ---------------------------------------------------------------------------
// Addressing helpers.

template <typename S>
Tensor<S> content_attention(const Tensor<S>& memory, const Tensor<S>& keys, const Tensor<S>& beta) {
  if (beta.rank() != 2 || beta.dim(0) != keys.dim(0) || beta.dim(1) != keys.dim(1)) {
    throw ShapeError("content_attention: beta " + to_string(beta.shape()) + " vs keys " + to_string(keys.shape()));
  }
  const Tensor<S> scores = cosine_scores(memory, keys);
  return softmax(mul(scores, reshape(beta, {beta.dim(0), beta.dim(1), 1})));
}

template <typename S>
Tensor<S> circular_shift(const Tensor<S>& weights, const Tensor<S>& shift) {
  if (shift.rank() != 3 || shift.dim(2) != 3 || shift.dim(0) != weights.dim(0) || shift.dim(1) != weights.dim(1)) {
    throw ShapeError("circular_shift: shift " + to_string(shift.shape()) + " vs weights " +
                     to_string(weights.shape()));
  }
  const Index L = weights.dim(2);
  if (L == 1) return weights;
  const Tensor<S> back = concat<S>({slice(weights, 2, 1, L - 1), slice(weights, 2, 0, 1)}, 2);     // w[i + 1]
  const Tensor<S> fwd = concat<S>({slice(weights, 2, L - 1, 1), slice(weights, 2, 0, L - 1)}, 2);  // w[i - 1]
  return add(add(mul(back, slice(shift, 2, 0, 1)), mul(weights, slice(shift, 2, 1, 1))),
             mul(fwd, slice(shift, 2, 2, 1)));
}

template <typename S>
Tensor<S> sharpen(const Tensor<S>& weights, const Tensor<S>& gamma) {
  const Tensor<S> g = reshape(gamma, {gamma.dim(0), gamma.dim(1), 1});
  const Tensor<S> p = exp(mul(g, log(add_scalar(weights, S(1e-12)))));
  return div(p, sum(p, 2, true));
}

template <typename S>
Tensor<S> update_links(const Tensor<S>& links, const Tensor<S>& write, const Tensor<S>& precedence) {
  const Index B = links.dim(0), L = links.dim(1);
  const Tensor<S> wi = reshape(write, {B, L, 1});
  const Tensor<S> wj = reshape(write, {B, 1, L});
  const Tensor<S> keep = sub(sub(Tensor<S>::full({1, 1, 1}, S(1)), wi), wj);
  const Tensor<S> fresh = bmm(wi, reshape(precedence, {B, 1, L}));
  Vec<S> mask = Vec<S>::Ones(L * L);
  for (Index i = 0; i < L; ++i) mask[i * L + i] = S(0);
  return mul(add(mul(keep, links), fresh), Tensor<S>::constant({1, L, L}, std::move(mask)));
}

template <typename S>
Tensor<S> update_precedence(const Tensor<S>& precedence, const Tensor<S>& write) {
  const Tensor<S> total = sum(write, 1, true);
  return add(mul(sub(Tensor<S>::full({1, 1}, S(1)), total), precedence), write);
}

template <typename S>
Tensor<S> read_memory(const Tensor<S>& memory, const Tensor<S>& weights) {
  return bmm(weights, memory);
}

template <typename S>
Tensor<S> erase_and_add(const Tensor<S>& memory, const Tensor<S>& write, const Tensor<S>& erase,
                        const Tensor<S>& add_vec) {
  const Index B = memory.dim(0), L = memory.dim(1), W = memory.dim(2);
  const Tensor<S> w = reshape(write, {B, L, 1});
  const Tensor<S> kept = mul(memory, sub(Tensor<S>::full({1, 1, 1}, S(1)), bmm(w, reshape(erase, {B, 1, W}))));
  return add(kept, bmm(w, reshape(add_vec, {B, 1, W})));
}

// ---------------------------------------------------------------------------

namespace {

// Sequential slicer over the columns of an interface vector [B, N].
template <typename S>
class Cursor {
 public:
  explicit Cursor(Tensor<S> t) : t_(std::move(t)) {}

  Tensor<S> take(Index n) {
    Tensor<S> out = slice(t_, 1, at_, n);
    at_ += n;
    return out;
  }
  /// [B, rows * cols] -> [B, rows, cols]
  Tensor<S> take(Index rows, Index cols) {
    Tensor<S> flat = take(rows * cols);
    return reshape(flat, {flat.dim(0), rows, cols});
  }
  Index consumed() const { return at_; }

 private:
  Tensor<S> t_;
  Index at_ = 0;
};

// Location-aware addressing for n heads: content lookup, interpolation with
// the previous weights, shift, then sharpen.
template <typename S>
Tensor<S> ntm_address(const Tensor<S>& memory, Cursor<S>& cur, Index n, Index W, const Tensor<S>& prev) {
  const Tensor<S> params = cur.take(n, W + 6);
  const Tensor<S> key = slice(params, 2, 0, W);
  const Index B = memory.dim(0);
  const Tensor<S> beta = reshape(softplus(slice(params, 2, W, 1)), {B, n});
  const Tensor<S> gate = sigmoid(slice(params, 2, W + 1, 1));
  const Tensor<S> shift = softmax(slice(params, 2, W + 2, 3));
  const Tensor<S> gamma = add_scalar(reshape(softplus(slice(params, 2, W + 5, 1)), {B, n}), S(1));
  const Tensor<S> content = content_attention(memory, key, beta);
  const Tensor<S> mixed = add(mul(gate, content), mul(sub(Tensor<S>::full({1, 1, 1}, S(1)), gate), prev));
  return sharpen(circular_shift(mixed, shift), gamma);
}

template <typename S>
Tensor<S> flatten_reads(const Tensor<S>& reads) {
  return reshape(reads, {reads.dim(0), reads.dim(1) * reads.dim(2)});
}

template <typename S>
Tensor<S> one_hot_rows(Index B, Index R, Index L) {
  const Index rows = R == 0 ? B : B * R;
  Vec<S> v = Vec<S>::Zero(rows * L);
  for (Index i = 0; i < rows; ++i) v[i * L] = S(1);
  return R == 0 ? Tensor<S>::constant({B, L}, std::move(v)) : Tensor<S>::constant({B, R, L}, std::move(v));
}

}  // namespace

template <typename S>
MemorySystem<S>::MemorySystem(ParameterStore<S>& store, const std::string& name, MemoryConfig config, Rng& rng)
    : config_(config) {
  config_.validate();
  const Index K = config_.latent, H = config_.hidden, R = config_.heads, L = config_.slots;
  const Index W = config_.word_width(), C = config_.context;
  switch (config_.kind) {
    case MemoryKind::vrnn:
      controller_ = Lstm<S>(store, name + ".controller", config_.features + K + C, H, rng);
      break;
    case MemoryKind::introspection: {
      controller_ = Lstm<S>(store, name + ".controller", K + C, H, rng);
      MlpSpec spec{H, {H, R * L}, {Activation::tanh, Activation::identity}};
      scorer_ = Mlp<S>(store, name + ".scorer", spec, rng);
      gates_ = store.add(name + ".gates", {R, K}, Vec<S>::Constant(R * K, static_cast<S>(config_.gate_init)));
      break;
    }
    case MemoryKind::ntm:
      controller_ = Lstm<S>(store, name + ".controller", K + C + R * W, H, rng);
      interface_ = Linear<S>(store, name + ".interface", K + H, (R + 1) * (W + 6) + 2 * W, rng);
      break;
    case MemoryKind::lru:
      controller_ = Lstm<S>(store, name + ".controller", K + C + R * W, H, rng);
      interface_ = Linear<S>(store, name + ".interface", K + H, R * (W + 1) + 1 + W, rng);
      break;
    case MemoryKind::dnc:
      controller_ = Lstm<S>(store, name + ".controller", K + C + R * W, H, rng);
      interface_ = Linear<S>(store, name + ".interface", K + H, R * (W + 5) + 3 * W + 2, rng);
      break;
  }
}

template <typename S>
MemoryState<S> MemorySystem<S>::initial(Index batch) const {
  if (batch < 1) throw std::invalid_argument("memory batch must be positive");
  const Index R = config_.heads, L = config_.slots, W = config_.word_width();
  const LstmState<S> ctrl = controller_.initial(batch);
  switch (config_.kind) {
    case MemoryKind::vrnn: return VrnnState<S>{ctrl};
    case MemoryKind::introspection: {
      IntrospectionState<S> s;
      s.controller = ctrl;
      s.rows.resize(static_cast<std::size_t>(L));
      return s;
    }
    case MemoryKind::ntm:
      return NtmState<S>{ctrl, Tensor<S>::zeros({batch, L, W}), one_hot_rows<S>(batch, R, L),
                         one_hot_rows<S>(batch, 0, L), Tensor<S>::zeros({batch, R * W})};
    case MemoryKind::lru:
      return LruState<S>{ctrl,
                         Tensor<S>::zeros({batch, L, W}),
                         Tensor<S>::zeros({batch, L}),
                         Tensor<S>::full({batch, R, L}, S(1) / static_cast<S>(L)),
                         Tensor<S>::zeros({batch, L}),
                         Tensor<S>::zeros({batch, R * W})};
    case MemoryKind::dnc:
      return DncState<S>{ctrl,
                         Tensor<S>::zeros({batch, L, W}),
                         Tensor<S>::zeros({batch, L}),
                         Tensor<S>::zeros({batch, L}),
                         Tensor<S>::zeros({batch, L, L}),
                         Tensor<S>::zeros({batch, R, L}),
                         Tensor<S>::zeros({batch, L}),
                         Tensor<S>::zeros({batch, R * W})};
  }
  throw std::logic_error("unreachable");
}

template <typename S>
void MemorySystem<S>::check_input(const MemoryInput<S>& in, Index batch) const {
  const auto expect = [batch](const Tensor<S>& t, Index width, const char* what) {
    if (!t.defined() || t.rank() != 2 || t.dim(0) != batch || t.dim(1) != width) {
      throw ShapeError(std::string("memory step: ") + what + " must be [" + std::to_string(batch) + ", " +
                       std::to_string(width) + "]" + (t.defined() ? ", got " + to_string(t.shape()) : ""));
    }
  };
  expect(in.z_prev, config_.latent, "z_prev");
  if (config_.context > 0) expect(in.context, config_.context, "context");
  if (config_.kind == MemoryKind::vrnn) expect(in.x_features, config_.features, "x_features");
}

template <typename S>
Tensor<S> MemorySystem<S>::controller_input(const MemoryInput<S>& in, const Tensor<S>& extra) const {
  std::vector<Tensor<S>> parts;
  if (config_.kind == MemoryKind::vrnn) parts.push_back(in.x_features);
  parts.push_back(in.z_prev);
  if (config_.context > 0) parts.push_back(in.context);
  if (extra.defined()) parts.push_back(extra);
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step(const MemoryState<S>& state, const MemoryInput<S>& input) const {
  if (!input.z_prev.defined()) throw ShapeError("memory step: z_prev is required");
  check_input(input, input.z_prev.dim(0));
  return std::visit(
      [&](const auto& s) -> MemoryStep<S> {
        using T = std::decay_t<decltype(s)>;
        if (s.controller.h.dim(0) != input.z_prev.dim(0)) throw ShapeError("memory step: batch size changed");
        if constexpr (std::is_same_v<T, VrnnState<S>>) {
          if (config_.kind != MemoryKind::vrnn) throw std::invalid_argument("memory state kind mismatch");
          return step_vrnn(s, input);
        } else if constexpr (std::is_same_v<T, IntrospectionState<S>>) {
          if (config_.kind != MemoryKind::introspection) throw std::invalid_argument("memory state kind mismatch");
          return step_introspection(s, input);
        } else if constexpr (std::is_same_v<T, NtmState<S>>) {
          if (config_.kind != MemoryKind::ntm) throw std::invalid_argument("memory state kind mismatch");
          return step_ntm(s, input);
        } else if constexpr (std::is_same_v<T, LruState<S>>) {
          if (config_.kind != MemoryKind::lru) throw std::invalid_argument("memory state kind mismatch");
          return step_lru(s, input);
        } else {
          if (config_.kind != MemoryKind::dnc) throw std::invalid_argument("memory state kind mismatch");
          return step_dnc(s, input);
        }
      },
      state);
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step_vrnn(const VrnnState<S>& s, const MemoryInput<S>& in) const {
  VrnnState<S> next{controller_.step(s.controller, controller_input(in, {}))};
  return {next.controller.h, next};
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step_introspection(const IntrospectionState<S>& s, const MemoryInput<S>& in) const {
  const Index B = in.z_prev.dim(0), R = config_.heads, K = config_.latent, L = config_.slots;
  IntrospectionState<S> next = s;
  if (in.write) {
    next.rows[static_cast<std::size_t>(next.cursor)] = in.z_prev;
    next.cursor = (next.cursor + 1) % L;
    next.fill = std::min(next.fill + 1, L);
  }
  next.controller = controller_.step(s.controller, controller_input(in, {}));
  if (next.fill == 0) {
    next.read_weights = Tensor<S>();
    return {Tensor<S>::zeros({B, R * K}), next};
  }
  const Tensor<S> scores = reshape(scorer_(next.controller.h), {B, R, L});
  const Tensor<S> k = softplus(next.fill == L ? scores : slice(scores, 2, 0, next.fill));
  next.read_weights = div(k, sum(k, 2, true));
  const Tensor<S> phi = read_memory(next.buffer(), next.read_weights);  // [B, R, K]
  return {flatten_reads(mul(phi, sigmoid(gates_))), next};
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step_ntm(const NtmState<S>& s, const MemoryInput<S>& in) const {
  const Index R = config_.heads, W = config_.word_width();
  NtmState<S> next = s;
  next.controller = controller_.step(s.controller, controller_input(in, s.reads));
  const Tensor<S> h = next.controller.h;
  Cursor<S> cur(interface_(concat<S>({in.z_prev, h}, 1)));
  const Tensor<S> write_prev = reshape(s.write_weights, {s.write_weights.dim(0), 1, s.write_weights.dim(1)});
  const Tensor<S> write = ntm_address(s.memory, cur, 1, W, write_prev);
  const Tensor<S> erase = sigmoid(cur.take(W));
  const Tensor<S> word = cur.take(W);
  if (in.write) {
    next.write_weights = reshape(write, {write.dim(0), write.dim(2)});
    next.memory = erase_and_add(s.memory, next.write_weights, erase, word);
  }
  next.read_weights = ntm_address(next.memory, cur, R, W, s.read_weights);
  next.reads = flatten_reads(read_memory(next.memory, next.read_weights));
  return {concat<S>({next.reads, h}, 1), next};
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step_lru(const LruState<S>& s, const MemoryInput<S>& in) const {
  const Index B = in.z_prev.dim(0), R = config_.heads, W = config_.word_width();
  const S gamma = static_cast<S>(config_.usage_decay);
  LruState<S> next = s;
  next.controller = controller_.step(s.controller, controller_input(in, s.reads));
  const Tensor<S> h = next.controller.h;
  Cursor<S> cur(interface_(concat<S>({in.z_prev, h}, 1)));
  const Tensor<S> read_params = cur.take(R, W + 1);
  const Tensor<S> alpha = sigmoid(cur.take(1));
  const Tensor<S> word = cur.take(W);
  if (in.write) {
    // Allocation sees usage rescaled by its steady-state bound.
    const S norm = (S(1) - gamma) / static_cast<S>(R + 1);
    // The free list leaves mass prod(u) unassigned; renormalize so the write
    // weights stay on the simplex.
    const Tensor<S> free = least_used_allocation(clamp(scale(s.usage, norm), S(0), S(1)));
    const Tensor<S> alloc = div(free, sum(free, -1, true));
    const Tensor<S> recent = scale(sum(s.read_weights, 1), S(1) / static_cast<S>(R));
    next.write_weights = add(mul(alpha, recent), mul(sub(Tensor<S>::full({1, 1}, S(1)), alpha), alloc));
    next.memory = add(s.memory, bmm(reshape(next.write_weights, {B, -1, 1}), reshape(word, {B, 1, W})));
  } else {
    next.write_weights = Tensor<S>::zeros(s.write_weights.shape());
  }
  const Tensor<S> keys = slice(read_params, 2, 0, W);
  const Tensor<S> beta = reshape(softplus(slice(read_params, 2, W, 1)), {B, R});
  next.read_weights = content_attention(next.memory, keys, beta);
  next.usage = add(add(scale(s.usage, gamma), sum(next.read_weights, 1)), next.write_weights);
  next.reads = flatten_reads(read_memory(next.memory, next.read_weights));
  return {concat<S>({next.reads, h}, 1), next};
}

template <typename S>
MemoryStep<S> MemorySystem<S>::step_dnc(const DncState<S>& s, const MemoryInput<S>& in) const {
  const Index B = in.z_prev.dim(0), R = config_.heads, W = config_.word_width(), L = config_.slots;
  const Tensor<S> one = Tensor<S>::full({1, 1}, S(1));
  DncState<S> next = s;
  next.controller = controller_.step(s.controller, controller_input(in, s.reads));
  const Tensor<S> h = next.controller.h;
  Cursor<S> cur(interface_(concat<S>({in.z_prev, h}, 1)));
  const Tensor<S> read_params = cur.take(R, W + 1);
  const Tensor<S> modes = softmax(cur.take(R, 3));
  const Tensor<S> free = sigmoid(cur.take(R));
  const Tensor<S> write_params = cur.take(1, W + 1);
  const Tensor<S> erase = sigmoid(cur.take(W));
  const Tensor<S> word = cur.take(W);
  const Tensor<S> alloc_gate = sigmoid(cur.take(1));

  if (in.write) {
    // Retention: slots read last step may be freed by the free gates.
    Tensor<S> retention;
    for (Index r = 0; r < R; ++r) {
      const Tensor<S> w = reshape(slice(s.read_weights, 1, r, 1), {B, L});
      const Tensor<S> keep = sub(one, mul(slice(free, 1, r, 1), w));
      retention = r == 0 ? keep : mul(retention, keep);
    }
    const Tensor<S> wp = s.write_weights;
    next.usage = mul(sub(add(s.usage, wp), mul(s.usage, wp)), retention);
    const Tensor<S> alloc = least_used_allocation(clamp(next.usage, S(0), S(1)));
    const Tensor<S> beta = reshape(softplus(slice(write_params, 2, W, 1)), {B, 1});
    const Tensor<S> content =
        reshape(content_attention(s.memory, slice(write_params, 2, 0, W), beta), {B, L});
    next.write_weights = add(mul(alloc_gate, alloc), mul(sub(one, alloc_gate), content));
    next.memory = erase_and_add(s.memory, next.write_weights, erase, word);
    next.links = update_links(s.links, next.write_weights, s.precedence);
    next.precedence = update_precedence(s.precedence, next.write_weights);
  }

  const Tensor<S> beta = reshape(softplus(slice(read_params, 2, W, 1)), {B, R});
  const Tensor<S> content = content_attention(next.memory, slice(read_params, 2, 0, W), beta);
  const Tensor<S> backward = bmm(s.read_weights, next.links);               // w^T TL
  const Tensor<S> forward = bmm(s.read_weights, next.links, false, true);   // TL w
  next.read_weights = add(add(mul(slice(modes, 2, 0, 1), backward), mul(slice(modes, 2, 1, 1), content)),
                          mul(slice(modes, 2, 2, 1), forward));
  next.reads = flatten_reads(read_memory(next.memory, next.read_weights));
  return {concat<S>({next.reads, h}, 1), next};
}

#define GTMM_INSTANTIATE(S)                                                                            \
  template struct IntrospectionState<S>;                                                               \
  template Tensor<S> content_attention<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);       \
  template Tensor<S> circular_shift<S>(const Tensor<S>&, const Tensor<S>&);                            \
  template Tensor<S> sharpen<S>(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> update_links<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> update_precedence<S>(const Tensor<S>&, const Tensor<S>&);                         \
  template Tensor<S> read_memory<S>(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> erase_and_add<S>(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,            \
                                      const Tensor<S>&);                                               \
  template class MemorySystem<S>;

GTMM_INSTANTIATE(float)
GTMM_INSTANTIATE(double)
#undef GTMM_INSTANTIATE

}  // namespace gtmm
