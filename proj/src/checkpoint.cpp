#include "prunekit/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "prunekit/errors.hpp"

namespace prunekit {

namespace {

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void put_f32(std::string& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  out.push_back(static_cast<char>(u & 0xff));
  out.push_back(static_cast<char>((u >> 8) & 0xff));
  out.push_back(static_cast<char>((u >> 16) & 0xff));
  out.push_back(static_cast<char>((u >> 24) & 0xff));
}

float get_f32(const char* p) {
  const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])); };
  const std::uint32_t u = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
};

// Zero-initialized model with the exact structure the header describes;
// handles ragged (compacted) head and channel extents.
Model<float> make_skeleton(const ModelConfig& cfg, double attn_scale, const PrunePlan& dims) {
  Model<float> m;
  m.config = cfg;
  m.attn_scale = attn_scale;
  auto extent = [&](const std::string& name) -> std::size_t {
    const PrunableDim* d = dims.find_dim(name);
    if (!d) throw DataError("checkpoint: missing dim entry '" + name + "'");
    return d->extent;
  };
  const std::size_t d = extent("model_d");
  m.config.d = d;
  m.token_embedding = Var<float>::parameter(Tensor<float>({cfg.vocab_size, d}));
  m.speaker_embedding = Var<float>::parameter(Tensor<float>({cfg.n_speakers, d}));
  m.positional = Tensor<float>({cfg.max_len, d});
  auto make_stack = [&](const char* stack, std::size_t layers) {
    std::vector<BlockParams<float>> blocks;
    for (std::size_t i = 0; i < layers; ++i) {
      const std::string p = std::string(stack) + std::to_string(i);
      BlockParams<float> b;
      const std::size_t heads = extent(p + ".head_count");
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t hd = extent(p + ".h" + std::to_string(h) + ".head_dk");
        AttentionHead<float> head;
        head.wq = Var<float>::parameter(Tensor<float>({d, hd}));
        head.bq = Var<float>::parameter(Tensor<float>({hd}));
        head.wk = Var<float>::parameter(Tensor<float>({d, hd}));
        head.bk = Var<float>::parameter(Tensor<float>({hd}));
        head.wv = Var<float>::parameter(Tensor<float>({d, hd}));
        head.bv = Var<float>::parameter(Tensor<float>({hd}));
        head.wo = Var<float>::parameter(Tensor<float>({hd, d}));
        b.heads.push_back(std::move(head));
      }
      b.attn_bias = Var<float>::parameter(Tensor<float>({d}));
      b.ln1_scale = Var<float>::parameter(Tensor<float>({d}));
      b.ln1_shift = Var<float>::parameter(Tensor<float>({d}));
      b.ln2_scale = Var<float>::parameter(Tensor<float>({d}));
      b.ln2_shift = Var<float>::parameter(Tensor<float>({d}));
      const std::size_t df = extent(p + ".ffn_df");
      b.ffn_up_w = Var<float>::parameter(Tensor<float>({d, df}));
      b.ffn_up_b = Var<float>::parameter(Tensor<float>({df}));
      b.ffn_down_w = Var<float>::parameter(Tensor<float>({df, d}));
      b.ffn_down_b = Var<float>::parameter(Tensor<float>({d}));
      blocks.push_back(std::move(b));
    }
    return blocks;
  };
  m.encoder = make_stack("enc", cfg.n_enc_layers);
  m.decoder = make_stack("dec", cfg.n_dec_layers);
  const std::size_t ah = extent("adaptor_hidden");
  const std::size_t ph = extent("postnet_hidden");
  m.config.adaptor_hidden = ah;
  m.config.postnet_hidden = ph;
  m.adaptor_w1 = Var<float>::parameter(Tensor<float>({ah, d, kConvKernel}));
  m.adaptor_b1 = Var<float>::parameter(Tensor<float>({ah}));
  m.adaptor_w2 = Var<float>::parameter(Tensor<float>({1, ah, kConvKernel}));
  m.adaptor_b2 = Var<float>::parameter(Tensor<float>({1}));
  m.aux_proj = Var<float>::parameter(Tensor<float>({1, d}));
  m.out_w = Var<float>::parameter(Tensor<float>({d, cfg.n_mel}));
  m.out_b = Var<float>::parameter(Tensor<float>({cfg.n_mel}));
  m.postnet_w1 = Var<float>::parameter(Tensor<float>({ph, cfg.n_mel, kConvKernel}));
  m.postnet_b1 = Var<float>::parameter(Tensor<float>({ph}));
  m.postnet_w2 = Var<float>::parameter(Tensor<float>({cfg.n_mel, ph, kConvKernel}));
  m.postnet_b2 = Var<float>::parameter(Tensor<float>({cfg.n_mel}));
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model<float>& model, const GateSet<float>& gates,
                     const PrunePlan& plan, const GateConfig& gate_config, std::uint64_t step) {
  std::ostringstream head;
  head << kCheckpointMagic << "\n";
  head << "step " << step << "\n";
  head << "attn_scale " << fmt_real(model.attn_scale) << "\n";
  const ModelConfig& c = model.config;
  head << "config vocab_size " << c.vocab_size << "\n";
  head << "config d " << c.d << "\n";
  head << "config n_enc_layers " << c.n_enc_layers << "\n";
  head << "config n_dec_layers " << c.n_dec_layers << "\n";
  head << "config n_heads " << c.n_heads << "\n";
  head << "config d_k " << c.d_k << "\n";
  head << "config d_f " << c.d_f << "\n";
  head << "config adaptor_hidden " << c.adaptor_hidden << "\n";
  head << "config postnet_hidden " << c.postnet_hidden << "\n";
  head << "config n_mel " << c.n_mel << "\n";
  head << "config n_speakers " << c.n_speakers << "\n";
  head << "config max_len " << c.max_len << "\n";
  head << "config ln_eps " << fmt_real(c.ln_eps) << "\n";
  head << "gatecfg beta " << fmt_real(gate_config.beta) << "\n";
  head << "gatecfg gamma " << fmt_real(gate_config.gamma) << "\n";
  head << "gatecfg eta " << fmt_real(gate_config.eta) << "\n";
  head << "gatecfg init_log_alpha " << fmt_real(gate_config.init_log_alpha) << "\n";
  for (const auto& d : plan.dims) {
    head << "dim " << d.name << " " << d.extent << " " << (d.enabled ? 1 : 0) << "\n";
  }
  for (const auto& b : plan.bindings) {
    head << "binding " << b.tensor << " " << b.axes.size();
    for (const auto& ab : b.axes) head << " " << ab.axis << ":" << ab.dim;
    if (b.scalar) head << " scalar " << b.scalar->dim << " " << b.scalar->index;
    head << "\n";
  }

  std::string payload;
  auto emit_tensor = [&](const std::string& name, const Tensor<float>& t) {
    head << "tensor " << name << " " << t.rank();
    for (const std::size_t e : t.shape) head << " " << e;
    head << "\n";
    for (const float v : t.data) put_f32(payload, v);
  };
  model.for_each_param([&](const std::string& name, const Var<float>& v) { emit_tensor(name, v.value()); });
  emit_tensor("positional", model.positional);
  for (const auto& g : gates.gates) {
    head << "gate " << g.name << " " << g.size() << "\n";
    for (const float v : g.log_alpha.value().data) put_f32(payload, v);
  }
  head << "data\n";

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
  const std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw DataError("checkpoint: '" + path + "' has wrong magic/version (expected '" +
                    std::string(kCheckpointMagic) + "')");
  }

  LoadedCheckpoint ck;
  ModelConfig cfg;
  double attn_scale = 1.0;
  PrunePlan dims_only;
  std::vector<TensorBinding> bindings;
  std::vector<TensorEntry> tensors;
  std::vector<std::pair<std::string, std::size_t>> gate_entries;

  while (std::getline(in, line)) {
    if (line == "data") break;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "step") {
      ls >> ck.step;
    } else if (kind == "attn_scale") {
      ls >> attn_scale;
    } else if (kind == "config") {
      std::string key;
      ls >> key;
      if (key == "vocab_size") ls >> cfg.vocab_size;
      else if (key == "d") ls >> cfg.d;
      else if (key == "n_enc_layers") ls >> cfg.n_enc_layers;
      else if (key == "n_dec_layers") ls >> cfg.n_dec_layers;
      else if (key == "n_heads") ls >> cfg.n_heads;
      else if (key == "d_k") ls >> cfg.d_k;
      else if (key == "d_f") ls >> cfg.d_f;
      else if (key == "adaptor_hidden") ls >> cfg.adaptor_hidden;
      else if (key == "postnet_hidden") ls >> cfg.postnet_hidden;
      else if (key == "n_mel") ls >> cfg.n_mel;
      else if (key == "n_speakers") ls >> cfg.n_speakers;
      else if (key == "max_len") ls >> cfg.max_len;
      else if (key == "ln_eps") ls >> cfg.ln_eps;
      else throw DataError("checkpoint: unknown config key '" + key + "'");
    } else if (kind == "gatecfg") {
      std::string key;
      ls >> key;
      if (key == "beta") ls >> ck.gate_config.beta;
      else if (key == "gamma") ls >> ck.gate_config.gamma;
      else if (key == "eta") ls >> ck.gate_config.eta;
      else if (key == "init_log_alpha") ls >> ck.gate_config.init_log_alpha;
      else throw DataError("checkpoint: unknown gatecfg key '" + key + "'");
    } else if (kind == "dim") {
      PrunableDim d;
      int enabled = 0;
      ls >> d.name >> d.extent >> enabled;
      d.enabled = enabled != 0;
      dims_only.dims.push_back(d);
    } else if (kind == "binding") {
      TensorBinding b;
      std::size_t n_axes = 0;
      ls >> b.tensor >> n_axes;
      for (std::size_t i = 0; i < n_axes; ++i) {
        std::string pair;
        ls >> pair;
        const auto colon = pair.find(':');
        if (colon == std::string::npos) throw DataError("checkpoint: malformed binding '" + line + "'");
        b.axes.push_back({static_cast<std::size_t>(std::stoul(pair.substr(0, colon))), pair.substr(colon + 1)});
      }
      std::string tag;
      if (ls >> tag) {
        if (tag != "scalar") throw DataError("checkpoint: malformed binding '" + line + "'");
        ScalarBinding sb;
        ls >> sb.dim >> sb.index;
        b.scalar = sb;
      }
      ls.clear();
      bindings.push_back(std::move(b));
    } else if (kind == "tensor") {
      TensorEntry e;
      std::size_t rank = 0;
      ls >> e.name >> rank;
      for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ext = 0;
        ls >> ext;
        e.shape.push_back(ext);
      }
      tensors.push_back(std::move(e));
    } else if (kind == "gate") {
      std::string name;
      std::size_t extent = 0;
      ls >> name >> extent;
      gate_entries.emplace_back(name, extent);
    } else {
      throw DataError("checkpoint: unexpected header line '" + line + "'");
    }
    if (ls.fail()) throw DataError("checkpoint: malformed header line '" + line + "'");
  }
  if (line != "data") throw DataError("checkpoint: missing data section in '" + path + "'");

  const PrunableDim* md = dims_only.find_dim("model_d");
  ck.model_d_enabled = md != nullptr && md->enabled;
  ck.model = make_skeleton(cfg, attn_scale, dims_only);

  // Strict shape validation: header inventory must match the skeleton
  // derived from config + dims, in enumeration order.
  std::vector<TensorEntry> expected;
  ck.model.for_each_param([&](const std::string& name, const Var<float>& v) {
    expected.push_back({name, v.value().shape});
  });
  expected.push_back({"positional", ck.model.positional.shape});
  if (tensors.size() != expected.size()) {
    throw DataError("checkpoint: tensor inventory mismatch (" + std::to_string(tensors.size()) +
                    " vs expected " + std::to_string(expected.size()) + ")");
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (tensors[i].name != expected[i].name || tensors[i].shape != expected[i].shape) {
      throw DataError("checkpoint: tensor '" + tensors[i].name + "' " + shape_str(tensors[i].shape) +
                      " does not match expected '" + expected[i].name + "' " +
                      shape_str(expected[i].shape));
    }
  }
  ck.plan = build_plan(ck.model, ck.model_d_enabled);
  if (ck.plan.dims.size() != dims_only.dims.size()) {
    throw DataError("checkpoint: dim inventory does not match the architecture");
  }
  for (std::size_t i = 0; i < ck.plan.dims.size(); ++i) {
    const auto& a = ck.plan.dims[i];
    const auto& b = dims_only.dims[i];
    if (a.name != b.name || a.extent != b.extent || a.enabled != b.enabled) {
      throw DataError("checkpoint: dim '" + b.name + "' does not match the architecture");
    }
  }
  if (bindings.size() != ck.plan.bindings.size()) {
    throw DataError("checkpoint: binding inventory does not match the architecture");
  }
  for (std::size_t i = 0; i < bindings.size(); ++i) {
    const auto& a = bindings[i];
    const auto& b = ck.plan.bindings[i];
    bool same = a.tensor == b.tensor && a.axes.size() == b.axes.size() &&
                a.scalar.has_value() == b.scalar.has_value();
    for (std::size_t j = 0; same && j < a.axes.size(); ++j)
      same = a.axes[j].axis == b.axes[j].axis && a.axes[j].dim == b.axes[j].dim;
    if (same && a.scalar) same = a.scalar->dim == b.scalar->dim && a.scalar->index == b.scalar->index;
    if (!same) throw DataError("checkpoint: binding for '" + a.tensor + "' does not match the plan");
  }
  ck.gates = make_gate_set<float>(ck.plan, ck.gate_config);
  if (gate_entries.size() != ck.gates.gates.size()) {
    throw DataError("checkpoint: gate inventory mismatch");
  }
  for (std::size_t i = 0; i < gate_entries.size(); ++i) {
    if (gate_entries[i].first != ck.gates.gates[i].name ||
        gate_entries[i].second != ck.gates.gates[i].size()) {
      throw DataError("checkpoint: gate '" + gate_entries[i].first + "' does not match the plan");
    }
  }

  // Payload: tensors in order, then gates in order.
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t want = 0;
  for (const auto& e : tensors) want += numel_of(e.shape);
  for (const auto& g : gate_entries) want += g.second;
  if (payload.size() != want * 4) {
    throw DataError("checkpoint: payload size " + std::to_string(payload.size()) + " != expected " +
                    std::to_string(want * 4));
  }
  const char* p = payload.data();
  auto read_into = [&](Tensor<float>& t) {
    for (auto& v : t.data) {
      v = get_f32(p);
      p += 4;
    }
  };
  ck.model.for_each_param([&](const std::string&, const Var<float>& v) {
    read_into(const_cast<Var<float>&>(v).mutable_value());
  });
  read_into(ck.model.positional);
  for (auto& g : ck.gates.gates) read_into(g.log_alpha.mutable_value());
  return ck;
}

}  // namespace prunekit
