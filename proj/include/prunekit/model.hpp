#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "prunekit/autodiff.hpp"
#include "prunekit/errors.hpp"
#include "prunekit/plan.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensor.hpp"

// Desk-scale FastSpeech-2-like network: embedding + sinusoidal positional
// encoding + speaker embedding, encoder/decoder transformer stacks, a
// simplified variance adaptor predicting one auxiliary feature per position,
// an output linear layer, and a residual conv post-net. No dropout anywhere;
// forward is deterministic given parameters.

namespace prunekit {

inline constexpr std::size_t kConvKernel = 3;

struct ModelConfig {
  std::size_t vocab_size{40};
  std::size_t d{32};
  std::size_t n_enc_layers{2};
  std::size_t n_dec_layers{2};
  std::size_t n_heads{2};
  std::size_t d_k{32};
  std::size_t d_f{64};
  std::size_t adaptor_hidden{16};
  std::size_t postnet_hidden{16};
  std::size_t n_mel{20};
  std::size_t n_speakers{20};
  std::size_t max_len{64};
  double ln_eps{1e-5};

  std::size_t head_dim() const { return d_k / n_heads; }

  void validate() const {
    if (n_heads < 1 || d_k % n_heads != 0) {
      throw ConfigError("model config: d_k (" + std::to_string(d_k) +
                        ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    for (const auto& [label, v] :
         std::initializer_list<std::pair<const char*, std::size_t>>{
             {"vocab_size", vocab_size}, {"d", d}, {"d_k", d_k}, {"d_f", d_f},
             {"adaptor_hidden", adaptor_hidden}, {"postnet_hidden", postnet_hidden},
             {"n_mel", n_mel}, {"n_speakers", n_speakers}, {"max_len", max_len}}) {
      if (v < 1) throw ConfigError(std::string("model config: ") + label + " must be >= 1");
    }
    if (ln_eps <= 0) throw ConfigError("model config: ln_eps must be > 0");
  }
};

template <typename T>
struct AttentionHead {
  Var<T> wq, bq, wk, bk, wv, bv, wo;
};

template <typename T>
struct BlockParams {
  std::vector<AttentionHead<T>> heads;
  Var<T> attn_bias;  // shared output bias, added after the head sum
  Var<T> ln1_scale, ln1_shift, ln2_scale, ln2_shift;
  Var<T> ffn_up_w, ffn_up_b, ffn_down_w, ffn_down_b;
};

template <typename T>
struct Model {
  ModelConfig config;
  double attn_scale{1.0};  // sqrt(d_k / n_heads) of the *original* model;
                           // preserved through compaction so masked and
                           // compacted attention agree exactly.
  Var<T> token_embedding;   // vocab x d
  Var<T> speaker_embedding; // n_speakers x d
  Tensor<T> positional;     // max_len x d, not a parameter
  std::vector<BlockParams<T>> encoder, decoder;
  Var<T> adaptor_w1, adaptor_b1;  // adaptor_hidden x d x K, adaptor_hidden
  Var<T> adaptor_w2, adaptor_b2;  // 1 x adaptor_hidden x K, 1
  Var<T> aux_proj;                // 1 x d
  Var<T> out_w, out_b;            // d x n_mel, n_mel
  Var<T> postnet_w1, postnet_b1;  // postnet_hidden x n_mel x K, postnet_hidden
  Var<T> postnet_w2, postnet_b2;  // n_mel x postnet_hidden x K, n_mel

  template <typename Fn>
  void for_each_param(Fn&& fn) const {
    fn("token_embedding", token_embedding);
    fn("speaker_embedding", speaker_embedding);
    auto visit_stack = [&](const char* stack, const std::vector<BlockParams<T>>& blocks) {
      for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = std::string(stack) + std::to_string(i) + ".";
        const auto& b = blocks[i];
        for (std::size_t h = 0; h < b.heads.size(); ++h) {
          const std::string hp = p + "attn.h" + std::to_string(h) + ".";
          fn(hp + "wq", b.heads[h].wq);
          fn(hp + "bq", b.heads[h].bq);
          fn(hp + "wk", b.heads[h].wk);
          fn(hp + "bk", b.heads[h].bk);
          fn(hp + "wv", b.heads[h].wv);
          fn(hp + "bv", b.heads[h].bv);
          fn(hp + "wo", b.heads[h].wo);
        }
        fn(p + "attn.bias", b.attn_bias);
        fn(p + "ln1.scale", b.ln1_scale);
        fn(p + "ln1.shift", b.ln1_shift);
        fn(p + "ffn.up_w", b.ffn_up_w);
        fn(p + "ffn.up_b", b.ffn_up_b);
        fn(p + "ffn.down_w", b.ffn_down_w);
        fn(p + "ffn.down_b", b.ffn_down_b);
        fn(p + "ln2.scale", b.ln2_scale);
        fn(p + "ln2.shift", b.ln2_shift);
      }
    };
    visit_stack("enc", encoder);
    visit_stack("dec", decoder);
    fn("adaptor.conv1.w", adaptor_w1);
    fn("adaptor.conv1.b", adaptor_b1);
    fn("adaptor.conv2.w", adaptor_w2);
    fn("adaptor.conv2.b", adaptor_b2);
    fn("adaptor.proj", aux_proj);
    fn("out.w", out_w);
    fn("out.b", out_b);
    fn("postnet.conv1.w", postnet_w1);
    fn("postnet.conv1.b", postnet_b1);
    fn("postnet.conv2.w", postnet_w2);
    fn("postnet.conv2.b", postnet_b2);
  }

  const Var<T>* find_param(const std::string& name) const {
    const Var<T>* found = nullptr;
    for_each_param([&](const std::string& n, const Var<T>& v) {
      if (n == name) found = &v;
    });
    return found;
  }

  Var<T>* find_param(const std::string& name) {
    return const_cast<Var<T>*>(static_cast<const Model<T>*>(this)->find_param(name));
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_param([&](const std::string&, const Var<T>& v) { n += v.value().numel(); });
    return n;
  }

  std::vector<Var<T>> all_params() const {
    std::vector<Var<T>> out;
    for_each_param([&](const std::string&, const Var<T>& v) { out.push_back(v); });
    return out;
  }

  // Vars are shared handles; clone() gives an independent parameter set.
  Model<T> clone() const {
    Model<T> m = *this;
    m.for_each_param([](const std::string&, const Var<T>& v) {
      auto& slot = const_cast<Var<T>&>(v);
      slot = Var<T>::parameter(slot.value());
    });
    return m;
  }
};

namespace detail {

template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t max_len, std::size_t d) {
  Tensor<T> pos({max_len, d});
  for (std::size_t l = 0; l < max_len; ++l)
    for (std::size_t j = 0; j < d; ++j) {
      const double angle =
          static_cast<double>(l) / std::pow(10000.0, 2.0 * static_cast<double>(j / 2) / static_cast<double>(d));
      pos.at(l, j) = static_cast<T>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pos;
}

template <typename T>
Var<T> init_weight(std::vector<std::size_t> shape, std::size_t fan_in, std::uint64_t seed,
                   const std::string& name) {
  Rng rng = stream_rng(seed, 0, name);
  Tensor<T> t(std::move(shape));
  const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * std_dev);
  return Var<T>::parameter(std::move(t));
}

template <typename T>
Var<T> init_embedding(std::vector<std::size_t> shape, double std_dev, std::uint64_t seed,
                      const std::string& name) {
  Rng rng = stream_rng(seed, 0, name);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * std_dev);
  return Var<T>::parameter(std::move(t));
}

template <typename T>
BlockParams<T> init_block(const ModelConfig& cfg, std::uint64_t seed, const std::string& prefix) {
  BlockParams<T> b;
  const std::size_t d = cfg.d, h = cfg.head_dim(), df = cfg.d_f;
  for (std::size_t i = 0; i < cfg.n_heads; ++i) {
    const std::string hp = prefix + ".h" + std::to_string(i) + ".";
    AttentionHead<T> head;
    head.wq = init_weight<T>({d, h}, d, seed, hp + "wq");
    head.bq = Var<T>::parameter(Tensor<T>({h}));
    head.wk = init_weight<T>({d, h}, d, seed, hp + "wk");
    head.bk = Var<T>::parameter(Tensor<T>({h}));
    head.wv = init_weight<T>({d, h}, d, seed, hp + "wv");
    head.bv = Var<T>::parameter(Tensor<T>({h}));
    head.wo = init_weight<T>({h, d}, h, seed, hp + "wo");
    b.heads.push_back(std::move(head));
  }
  b.attn_bias = Var<T>::parameter(Tensor<T>({d}));
  b.ln1_scale = Var<T>::parameter(Tensor<T>::full({d}, T(1)));
  b.ln1_shift = Var<T>::parameter(Tensor<T>({d}));
  b.ln2_scale = Var<T>::parameter(Tensor<T>::full({d}, T(1)));
  b.ln2_shift = Var<T>::parameter(Tensor<T>({d}));
  b.ffn_up_w = init_weight<T>({d, df}, d, seed, prefix + ".up_w");
  b.ffn_up_b = Var<T>::parameter(Tensor<T>({df}));
  b.ffn_down_w = init_weight<T>({df, d}, df, seed, prefix + ".down_w");
  b.ffn_down_b = Var<T>::parameter(Tensor<T>({d}));
  return b;
}

}  // namespace detail

template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  m.attn_scale = std::sqrt(static_cast<double>(cfg.head_dim()));
  m.token_embedding = detail::init_embedding<T>({cfg.vocab_size, cfg.d}, 0.5, seed, "token_embedding");
  m.speaker_embedding = detail::init_embedding<T>({cfg.n_speakers, cfg.d}, 0.1, seed, "speaker_embedding");
  m.positional = detail::sinusoidal_encoding<T>(cfg.max_len, cfg.d);
  for (std::size_t i = 0; i < cfg.n_enc_layers; ++i)
    m.encoder.push_back(detail::init_block<T>(cfg, seed, "enc" + std::to_string(i)));
  for (std::size_t i = 0; i < cfg.n_dec_layers; ++i)
    m.decoder.push_back(detail::init_block<T>(cfg, seed, "dec" + std::to_string(i)));
  m.adaptor_w1 = detail::init_weight<T>({cfg.adaptor_hidden, cfg.d, kConvKernel}, cfg.d * kConvKernel,
                                        seed, "adaptor.conv1.w");
  m.adaptor_b1 = Var<T>::parameter(Tensor<T>({cfg.adaptor_hidden}));
  m.adaptor_w2 = detail::init_weight<T>({1, cfg.adaptor_hidden, kConvKernel},
                                        cfg.adaptor_hidden * kConvKernel, seed, "adaptor.conv2.w");
  m.adaptor_b2 = Var<T>::parameter(Tensor<T>({1}));
  m.aux_proj = detail::init_embedding<T>({1, cfg.d}, 0.1, seed, "adaptor.proj");
  m.out_w = detail::init_weight<T>({cfg.d, cfg.n_mel}, cfg.d, seed, "out.w");
  m.out_b = Var<T>::parameter(Tensor<T>({cfg.n_mel}));
  m.postnet_w1 = detail::init_weight<T>({cfg.postnet_hidden, cfg.n_mel, kConvKernel},
                                        cfg.n_mel * kConvKernel, seed, "postnet.conv1.w");
  m.postnet_b1 = Var<T>::parameter(Tensor<T>({cfg.postnet_hidden}));
  m.postnet_w2 = detail::init_weight<T>({cfg.n_mel, cfg.postnet_hidden, kConvKernel},
                                        cfg.postnet_hidden * kConvKernel, seed, "postnet.conv2.w");
  m.postnet_b2 = Var<T>::parameter(Tensor<T>({cfg.n_mel}));
  return m;
}

// Builds the dependency ledger for one model. Extents come from the actual
// tensor shapes, so the plan works for ragged (already compacted) models too.
template <typename T>
PrunePlan build_plan(const Model<T>& m, bool enable_model_d = false) {
  PrunePlan plan;
  const std::size_t d = m.config.d;
  plan.dims.push_back({"model_d", d, enable_model_d});

  auto stack_dims = [&](const char* stack, const std::vector<BlockParams<T>>& blocks) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = std::string(stack) + std::to_string(i);
      plan.dims.push_back({p + ".head_count", blocks[i].heads.size(), true});
      for (std::size_t h = 0; h < blocks[i].heads.size(); ++h) {
        plan.dims.push_back(
            {p + ".h" + std::to_string(h) + ".head_dk", blocks[i].heads[h].wq.value().shape[1], true});
      }
      plan.dims.push_back({p + ".ffn_df", blocks[i].ffn_up_w.value().shape[1], true});
    }
  };
  stack_dims("enc", m.encoder);
  stack_dims("dec", m.decoder);
  plan.dims.push_back({"adaptor_hidden", m.adaptor_w1.value().shape[0], true});
  plan.dims.push_back({"postnet_hidden", m.postnet_w1.value().shape[0], true});

  auto bind = [&](const std::string& tensor, std::vector<AxisBinding> axes,
                  std::optional<ScalarBinding> scalar = std::nullopt) {
    const Var<T>* p = m.find_param(tensor);
    if (!p) throw UsageError("build_plan: no parameter named '" + tensor + "'");
    for (const auto& ab : axes) {
      const PrunableDim* dim = nullptr;
      for (const auto& dd : plan.dims)
        if (dd.name == ab.dim) dim = &dd;
      if (!dim || ab.axis >= p->value().rank() || p->value().shape[ab.axis] != dim->extent) {
        throw UsageError("build_plan: binding of '" + tensor + "' axis " + std::to_string(ab.axis) +
                         " to '" + ab.dim + "' does not match tensor shape " +
                         shape_str(p->value().shape));
      }
    }
    plan.bindings.push_back({tensor, p->value().shape, std::move(axes), std::move(scalar)});
  };

  bind("token_embedding", {{1, "model_d"}});
  bind("speaker_embedding", {{1, "model_d"}});
  auto bind_stack = [&](const char* stack, const std::vector<BlockParams<T>>& blocks) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = std::string(stack) + std::to_string(i);
      for (std::size_t h = 0; h < blocks[i].heads.size(); ++h) {
        const std::string hp = p + ".attn.h" + std::to_string(h) + ".";
        const std::string dk = p + ".h" + std::to_string(h) + ".head_dk";
        const ScalarBinding head_member{p + ".head_count", h};
        bind(hp + "wq", {{0, "model_d"}, {1, dk}}, head_member);
        bind(hp + "bq", {{0, dk}}, head_member);
        bind(hp + "wk", {{0, "model_d"}, {1, dk}}, head_member);
        bind(hp + "bk", {{0, dk}}, head_member);
        bind(hp + "wv", {{0, "model_d"}, {1, dk}}, head_member);
        bind(hp + "bv", {{0, dk}}, head_member);
        bind(hp + "wo", {{0, dk}, {1, "model_d"}}, head_member);
      }
      bind(p + ".attn.bias", {{0, "model_d"}});
      bind(p + ".ln1.scale", {{0, "model_d"}});
      bind(p + ".ln1.shift", {{0, "model_d"}});
      bind(p + ".ffn.up_w", {{0, "model_d"}, {1, p + ".ffn_df"}});
      bind(p + ".ffn.up_b", {{0, p + ".ffn_df"}});
      bind(p + ".ffn.down_w", {{0, p + ".ffn_df"}, {1, "model_d"}});
      bind(p + ".ffn.down_b", {{0, "model_d"}});
      bind(p + ".ln2.scale", {{0, "model_d"}});
      bind(p + ".ln2.shift", {{0, "model_d"}});
    }
  };
  bind_stack("enc", m.encoder);
  bind_stack("dec", m.decoder);
  bind("adaptor.conv1.w", {{0, "adaptor_hidden"}, {1, "model_d"}});
  bind("adaptor.conv1.b", {{0, "adaptor_hidden"}});
  bind("adaptor.conv2.w", {{1, "adaptor_hidden"}});
  bind("adaptor.conv2.b", {});
  bind("adaptor.proj", {{1, "model_d"}});
  bind("out.w", {{0, "model_d"}});
  bind("out.b", {});
  bind("postnet.conv1.w", {{0, "postnet_hidden"}});
  bind("postnet.conv1.b", {{0, "postnet_hidden"}});
  bind("postnet.conv2.w", {{1, "postnet_hidden"}});
  bind("postnet.conv2.b", {});

  // Coverage check: every parameter the forward pass reads must have a
  // binding (axes not listed are declared unmasked by construction).
  m.for_each_param([&](const std::string& name, const Var<T>&) {
    if (!plan.find_binding(name)) {
      throw UsageError("build_plan: parameter '" + name + "' has no mask binding");
    }
  });

  plan.lambda = static_cast<double>(m.param_count());
  return plan;
}

// Resolves parameters through the plan's mask bindings. Masked tensors are
// built once and cached so one step shares a single masked view per tensor.
template <typename T>
class ParamView {
 public:
  explicit ParamView(const Model<T>& m) : model_(m) {}
  ParamView(const Model<T>& m, const PrunePlan& plan, const MaskMap<T>& masks)
      : model_(m), plan_(&plan), masks_(&masks) {}

  bool masked() const { return plan_ != nullptr; }

  Var<T> get(const std::string& name) const {
    const Var<T>* p = model_.find_param(name);
    if (!p) throw UsageError("ParamView: no parameter named '" + name + "'");
    if (!plan_) return *p;
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const TensorBinding* b = plan_->find_binding(name);
    if (!b) throw UsageError("ParamView: plan does not cover '" + name + "'");
    Var<T> out = apply_mask(*p, *b, *plan_, *masks_);
    cache_.emplace(name, out);
    return out;
  }

  // Gate vector for a dimension, when masking is active and the dim enabled.
  std::optional<Var<T>> dim_mask(const std::string& dim) const {
    if (!plan_ || !plan_->dim_enabled(dim)) return std::nullopt;
    return detail::mask_for(*masks_, dim);
  }

 private:
  const Model<T>& model_;
  const PrunePlan* plan_{nullptr};
  const MaskMap<T>* masks_{nullptr};
  mutable std::map<std::string, Var<T>> cache_;
};

// One attention head: softmax(Q K^T / attn_scale) V with Q/K/V drawn from X through
// this head's (possibly masked) projections. Returns [L x head_dim].
template <typename T>
Var<T> self_attention(const Var<T>& wq, const Var<T>& bq, const Var<T>& wk, const Var<T>& bk,
                      const Var<T>& wv, const Var<T>& bv, const Var<T>& x, double attn_scale) {
  if (x.value().shape.empty() || x.value().shape[0] == 0) {
    throw DataError("self_attention: empty sequence");
  }
  auto q = add_rowvec(matmul(x, wq), bq);
  auto k = add_rowvec(matmul(x, wk), bk);
  auto v = add_rowvec(matmul(x, wv), bv);
  auto attn = softmax_rows(scale_const(matmul_nt(q, k), static_cast<T>(1.0 / attn_scale)));
  return matmul(attn, v);
}

// Multi-head attention: sum over heads of SelfAtt_i(X) W_O_i; a head-count gate multiplies
// each head's summand.
template <typename T>
Var<T> mha(const BlockParams<T>& block, const std::string& prefix, const Var<T>& x,
           double attn_scale, const ParamView<T>& view) {
  const auto head_gate = view.dim_mask(prefix + ".head_count");
  Var<T> acc;
  for (std::size_t h = 0; h < block.heads.size(); ++h) {
    const std::string hp = prefix + ".attn.h" + std::to_string(h) + ".";
    auto ctx = self_attention(view.get(hp + "wq"), view.get(hp + "bq"), view.get(hp + "wk"),
                              view.get(hp + "bk"), view.get(hp + "wv"), view.get(hp + "bv"), x,
                              attn_scale);
    auto out = matmul(ctx, view.get(hp + "wo"));
    if (head_gate) out = scale_by(out, element(*head_gate, h));
    acc = acc.defined() ? add(acc, out) : out;
  }
  if (!acc.defined()) {
    acc = Var<T>::constant(Tensor<T>({x.value().shape[0], view.get(prefix + ".attn.bias").value().numel()}));
  }
  return add_rowvec(acc, view.get(prefix + ".attn.bias"));
}

// Position-wise feed-forward: ReLU(X W_U + b_U) W_D + b_D.
template <typename T>
Var<T> ffn(const BlockParams<T>& block, const std::string& prefix, const Var<T>& x,
           const ParamView<T>& view) {
  auto hidden = relu(add_rowvec(matmul(x, view.get(prefix + ".ffn.up_w")), view.get(prefix + ".ffn.up_b")));
  return add_rowvec(matmul(hidden, view.get(prefix + ".ffn.down_w")), view.get(prefix + ".ffn.down_b"));
}

// Post-norm transformer block: LN(MHA(X)+X) then LN(FFN(X')+X'). Layer-norm scale and
// shift stay raw here; the model_d gate enters through the gated layer norm,
// which also reweights the row statistics so binary masking matches the
// physically compacted network.
template <typename T>
Var<T> transformer_block(const BlockParams<T>& block, const std::string& prefix, const Var<T>& x,
                         double attn_scale, T ln_eps, const ParamView<T>& view) {
  const auto zd = view.dim_mask("model_d");
  const Var<T> zd_or_none = zd ? *zd : Var<T>{};
  auto h1 = layer_norm_gated(add(mha(block, prefix, x, attn_scale, view), x), block.ln1_scale,
                             block.ln1_shift, ln_eps, zd_or_none);
  auto h2 = layer_norm_gated(add(ffn(block, prefix, h1, view), h1), block.ln2_scale, block.ln2_shift,
                             ln_eps, zd_or_none);
  return h2;
}

template <typename T>
struct ForwardResult {
  Var<T> mel_before;  // L x n_mel
  Var<T> mel_after;   // L x n_mel
  Var<T> aux;         // L x 1
};

template <typename T>
ForwardResult<T> forward(const Model<T>& m, const std::vector<std::size_t>& tokens,
                         std::size_t speaker_id, const ParamView<T>& view) {
  const std::size_t L = tokens.size();
  if (L == 0) throw DataError("forward: empty token sequence");
  if (L > m.config.max_len) {
    throw DataError("forward: sequence length " + std::to_string(L) + " exceeds max_len " +
                    std::to_string(m.config.max_len));
  }
  for (const std::size_t t : tokens) {
    if (t >= m.config.vocab_size) {
      throw DataError("forward: token id " + std::to_string(t) + " out of vocabulary");
    }
  }
  if (speaker_id >= m.speaker_embedding.value().shape[0]) {
    throw DataError("forward: unknown speaker id " + std::to_string(speaker_id));
  }

  Tensor<T> pos_rows({L, m.config.d});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t j = 0; j < m.config.d; ++j) pos_rows.at(l, j) = m.positional.at(l, j);
  Var<T> pos = Var<T>::constant(std::move(pos_rows));
  if (const auto zd = view.dim_mask("model_d")) pos = scale_axis(pos, *zd, 1);

  auto tok = lookup_rows(view.get("token_embedding"), tokens);
  auto spk = reshape(lookup_rows(view.get("speaker_embedding"), {speaker_id}), {m.config.d});
  auto x = add_rowvec(add(tok, pos), spk);

  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    x = transformer_block(m.encoder[i], "enc" + std::to_string(i), x, m.attn_scale,
                          static_cast<T>(m.config.ln_eps), view);
  }

  auto hidden = relu(conv1d_same(x, view.get("adaptor.conv1.w"), view.get("adaptor.conv1.b")));
  auto aux = conv1d_same(hidden, view.get("adaptor.conv2.w"), view.get("adaptor.conv2.b"));
  x = add(x, matmul(aux, view.get("adaptor.proj")));

  x = add(x, pos);
  for (std::size_t i = 0; i < m.decoder.size(); ++i) {
    x = transformer_block(m.decoder[i], "dec" + std::to_string(i), x, m.attn_scale,
                          static_cast<T>(m.config.ln_eps), view);
  }

  auto mel_before = add_rowvec(matmul(x, view.get("out.w")), view.get("out.b"));
  auto post = relu(conv1d_same(mel_before, view.get("postnet.conv1.w"), view.get("postnet.conv1.b")));
  auto mel_after = add(mel_before, conv1d_same(post, view.get("postnet.conv2.w"), view.get("postnet.conv2.b")));

  return {mel_before, mel_after, aux};
}

template <typename T>
ForwardResult<T> forward(const Model<T>& m, const std::vector<std::size_t>& tokens,
                         std::size_t speaker_id) {
  return forward(m, tokens, speaker_id, ParamView<T>(m));
}

}  // namespace prunekit
