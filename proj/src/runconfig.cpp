#include "prunekit/runconfig.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "prunekit/errors.hpp"

namespace prunekit {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    const long long x = std::stoll(v);
    if (x < 0) throw std::out_of_range("negative");
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("config: bad integer for '" + key + "': " + v);
  }
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    return std::stod(v);
  } catch (const std::exception&) {
    throw ConfigError("config: bad real for '" + key + "': " + v);
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean for '" + key + "': " + v);
}

std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  gate.validate();
  if (reg_mode != "sampled" && reg_mode != "expected") {
    throw ConfigError("config: reg_mode must be 'sampled' or 'expected', got '" + reg_mode + "'");
  }
  if (reg_mode == "expected" && gate.gamma >= 0.0) {
    throw ConfigError("config: reg_mode=expected requires gate_gamma < 0");
  }
  if (optimizer != "adam" && optimizer != "sgd") {
    throw ConfigError("config: optimizer must be 'adam' or 'sgd', got '" + optimizer + "'");
  }
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (task_support < 1 || task_eval < 1) throw ConfigError("config: task sizes must be >= 1");
  if (seq_min_len < 1 || seq_max_len < seq_min_len || seq_max_len > model.max_len) {
    throw ConfigError("config: need 1 <= seq_min_len <= seq_max_len <= max_len");
  }
  if (stage_max_steps < stage_min_steps) {
    throw ConfigError("config: stage_max_steps must be >= stage_min_steps");
  }
  if (reg_multiplier < 0.0) throw ConfigError("config: reg_multiplier must be >= 0");
}

void apply_config_line(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "vocab_size") c.model.vocab_size = parse_size(key, value);
  else if (key == "model_dim") c.model.d = parse_size(key, value);
  else if (key == "enc_layers") c.model.n_enc_layers = parse_size(key, value);
  else if (key == "dec_layers") c.model.n_dec_layers = parse_size(key, value);
  else if (key == "heads") c.model.n_heads = parse_size(key, value);
  else if (key == "attn_dim") c.model.d_k = parse_size(key, value);
  else if (key == "ffn_dim") c.model.d_f = parse_size(key, value);
  else if (key == "adaptor_hidden") c.model.adaptor_hidden = parse_size(key, value);
  else if (key == "postnet_hidden") c.model.postnet_hidden = parse_size(key, value);
  else if (key == "mel_dim") c.model.n_mel = parse_size(key, value);
  else if (key == "speakers") c.model.n_speakers = parse_size(key, value);
  else if (key == "max_len") c.model.max_len = parse_size(key, value);
  else if (key == "ln_eps") c.model.ln_eps = parse_real(key, value);
  else if (key == "gate_beta") c.gate.beta = parse_real(key, value);
  else if (key == "gate_gamma") c.gate.gamma = parse_real(key, value);
  else if (key == "gate_eta") c.gate.eta = parse_real(key, value);
  else if (key == "gate_init_log_alpha") c.gate.init_log_alpha = parse_real(key, value);
  else if (key == "corpus_seed") c.corpus_seed = parse_u64(key, value);
  else if (key == "samples_per_speaker") c.samples_per_speaker = parse_size(key, value);
  else if (key == "task_support") c.task_support = parse_size(key, value);
  else if (key == "task_eval") c.task_eval = parse_size(key, value);
  else if (key == "seq_min_len") c.seq_min_len = parse_size(key, value);
  else if (key == "seq_max_len") c.seq_max_len = parse_size(key, value);
  else if (key == "teacher_hidden") c.teacher_hidden = parse_size(key, value);
  else if (key == "teacher_dev_scale") c.teacher_dev_scale = parse_real(key, value);
  else if (key == "seed") c.seed = parse_u64(key, value);
  else if (key == "pretrain_steps") c.pretrain_steps = parse_size(key, value);
  else if (key == "stage_min_steps") c.stage_min_steps = parse_size(key, value);
  else if (key == "stage_max_steps") c.stage_max_steps = parse_size(key, value);
  else if (key == "eval_every") c.eval_every = parse_size(key, value);
  else if (key == "log_every") c.log_every = parse_size(key, value);
  else if (key == "batch_size") c.batch_size = parse_size(key, value);
  else if (key == "lr_weights") c.lr_weights = parse_real(key, value);
  else if (key == "lr_gates") c.lr_gates = parse_real(key, value);
  else if (key == "aux_loss_weight") c.aux_loss_weight = parse_real(key, value);
  else if (key == "reg_multiplier") c.reg_multiplier = parse_real(key, value);
  else if (key == "reg_mode") c.reg_mode = value;
  else if (key == "optimizer") c.optimizer = value;
  else if (key == "prune_model_dim") c.prune_model_dim = parse_bool(key, value);
  else if (key == "train_weights_during_prune") c.train_weights_during_prune = parse_bool(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

RunConfig parse_run_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value': " + line);
    }
    apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str());
}

std::string run_config_text(const RunConfig& c) {
  std::ostringstream out;
  out << "# prunekit run configuration\n";
  out << "\n# model\n";
  out << "vocab_size = " << c.model.vocab_size << "\n";
  out << "model_dim = " << c.model.d << "\n";
  out << "enc_layers = " << c.model.n_enc_layers << "\n";
  out << "dec_layers = " << c.model.n_dec_layers << "\n";
  out << "heads = " << c.model.n_heads << "\n";
  out << "attn_dim = " << c.model.d_k << "\n";
  out << "ffn_dim = " << c.model.d_f << "\n";
  out << "adaptor_hidden = " << c.model.adaptor_hidden << "\n";
  out << "postnet_hidden = " << c.model.postnet_hidden << "\n";
  out << "mel_dim = " << c.model.n_mel << "\n";
  out << "speakers = " << c.model.n_speakers << "\n";
  out << "max_len = " << c.model.max_len << "\n";
  out << "ln_eps = " << fmt_real(c.model.ln_eps) << "\n";
  out << "\n# gates\n";
  out << "gate_beta = " << fmt_real(c.gate.beta) << "\n";
  out << "gate_gamma = " << fmt_real(c.gate.gamma) << "\n";
  out << "gate_eta = " << fmt_real(c.gate.eta) << "\n";
  out << "gate_init_log_alpha = " << fmt_real(c.gate.init_log_alpha) << "\n";
  out << "\n# corpus\n";
  out << "corpus_seed = " << c.corpus_seed << "\n";
  out << "samples_per_speaker = " << c.samples_per_speaker << "\n";
  out << "task_support = " << c.task_support << "\n";
  out << "task_eval = " << c.task_eval << "\n";
  out << "seq_min_len = " << c.seq_min_len << "\n";
  out << "seq_max_len = " << c.seq_max_len << "\n";
  out << "teacher_hidden = " << c.teacher_hidden << "\n";
  out << "teacher_dev_scale = " << fmt_real(c.teacher_dev_scale) << "\n";
  out << "\n# training\n";
  out << "seed = " << c.seed << "\n";
  out << "pretrain_steps = " << c.pretrain_steps << "\n";
  out << "stage_min_steps = " << c.stage_min_steps << "\n";
  out << "stage_max_steps = " << c.stage_max_steps << "\n";
  out << "eval_every = " << c.eval_every << "\n";
  out << "log_every = " << c.log_every << "\n";
  out << "batch_size = " << c.batch_size << "\n";
  out << "lr_weights = " << fmt_real(c.lr_weights) << "\n";
  out << "lr_gates = " << fmt_real(c.lr_gates) << "\n";
  out << "aux_loss_weight = " << fmt_real(c.aux_loss_weight) << "\n";
  out << "reg_multiplier = " << fmt_real(c.reg_multiplier) << "\n";
  out << "reg_mode = " << c.reg_mode << "\n";
  out << "optimizer = " << c.optimizer << "\n";
  out << "prune_model_dim = " << (c.prune_model_dim ? "true" : "false") << "\n";
  out << "train_weights_during_prune = " << (c.train_weights_during_prune ? "true" : "false") << "\n";
  return out.str();
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("config: cannot write '" + path + "'");
  out << run_config_text(cfg);
}

}  // namespace prunekit
