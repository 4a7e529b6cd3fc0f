#include "maskmamba/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace maskmamba {

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model.layers must be >= 1");
  if (hidden < 2 || hidden % 2 != 0)
    throw std::invalid_argument("model.hidden must be even and >= 2, got " +
                                std::to_string(hidden));
  if ((scheme == SchemeKind::SerialV1 || scheme == SchemeKind::SerialV2) && n_layers % 2 != 0)
    throw std::invalid_argument("serial schemes require an even layer count, got " +
                                std::to_string(n_layers));
  if (scheme == SchemeKind::GroupV1 && hidden % 2 != 0)
    throw std::invalid_argument("group_v1 requires hidden divisible by 2");
  if (scheme == SchemeKind::GroupV2 && hidden % 4 != 0)
    throw std::invalid_argument("group_v2 requires hidden divisible by 4");
  if (codebook_size < 2) throw std::invalid_argument("model.codebook_size must be >= 2");
  if (grid_h < 1 || grid_w < 1) throw std::invalid_argument("model.grid must be positive");
  if (cond_type == CondType::Class && n_classes < 1)
    throw std::invalid_argument("model.classes must be >= 1");
  if (cond_type == CondType::Text && text_len < 1)
    throw std::invalid_argument("model.text_len must be >= 1");
  if (d_state < 1) throw std::invalid_argument("model.d_state must be >= 1");
  if (conv_k_std < 1 || conv_k_std % 2 == 0)
    throw std::invalid_argument("model.conv_k_std must be odd and >= 1");
  if (conv_k_causal < 1) throw std::invalid_argument("model.conv_k_causal must be >= 1");
}

void MaskSpec::validate() const {
  if (!(ratio_min > 0.0) || ratio_min > ratio_max || ratio_max > 1.0)
    throw std::invalid_argument("mask ratio range must satisfy 0 < min <= max <= 1");
}

void DecodeConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("decode.steps must be >= 1");
  if (cfg_scale < 0.0) throw std::invalid_argument("decode.cfg must be >= 0");
  if (!(temperature > 0.0)) throw std::invalid_argument("decode.temperature must be > 0");
}

double LrSchedule::at(Index step) const {
  if (step < 0) throw std::invalid_argument("LrSchedule: negative step");
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double t = static_cast<double>(step - warmup_steps) / span;
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

std::string to_string(SchemeKind k) {
  switch (k) {
    case SchemeKind::PureMamba: return "pure_mamba";
    case SchemeKind::PureTransformer: return "pure_transformer";
    case SchemeKind::GroupV1: return "group_v1";
    case SchemeKind::GroupV2: return "group_v2";
    case SchemeKind::SerialV1: return "serial_v1";
    case SchemeKind::SerialV2: return "serial_v2";
  }
  return "?";
}

std::string to_string(MambaVariant v) { return v == MambaVariant::V1 ? "v1" : "v2"; }

std::string to_string(CondPos p) {
  switch (p) {
    case CondPos::Head: return "head";
    case CondPos::Middle: return "middle";
    case CondPos::Tail: return "tail";
  }
  return "?";
}

std::string to_string(CondType t) { return t == CondType::Class ? "class" : "text"; }

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

namespace {

[[noreturn]] void cfg_error(int line, const std::string& msg) {
  throw std::invalid_argument("config line " + std::to_string(line) + ": " + msg);
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::int64_t parse_int(const std::string& v, int line) {
  try {
    std::size_t pos = 0;
    std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    cfg_error(line, "expected an integer, got '" + v + "'");
  }
}

double parse_double(const std::string& v, int line) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    cfg_error(line, "expected a number, got '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& v, int line) {
  try {
    std::size_t pos = 0;
    std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return r;
  } catch (...) {
    cfg_error(line, "expected a non-negative integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  cfg_error(line, "expected true/false, got '" + v + "'");
}

SchemeKind parse_scheme(const std::string& v, int line) {
  if (v == "pure_mamba") return SchemeKind::PureMamba;
  if (v == "pure_transformer") return SchemeKind::PureTransformer;
  if (v == "group_v1") return SchemeKind::GroupV1;
  if (v == "group_v2") return SchemeKind::GroupV2;
  if (v == "serial_v1") return SchemeKind::SerialV1;
  if (v == "serial_v2") return SchemeKind::SerialV2;
  cfg_error(line, "unknown scheme '" + v + "'");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  cfg.precision = default_precision();

  using Handler = std::function<void(RunConfig&, const std::string&, int)>;
  static const std::map<std::string, Handler> handlers = {
      {"model.layers", [](RunConfig& c, const std::string& v, int l) { c.model.n_layers = parse_int(v, l); }},
      {"model.hidden", [](RunConfig& c, const std::string& v, int l) { c.model.hidden = parse_int(v, l); }},
      {"model.scheme", [](RunConfig& c, const std::string& v, int l) { c.model.scheme = parse_scheme(v, l); }},
      {"model.mamba",
       [](RunConfig& c, const std::string& v, int l) {
         if (v == "v1") c.model.mamba = MambaVariant::V1;
         else if (v == "v2") c.model.mamba = MambaVariant::V2;
         else cfg_error(l, "mamba variant must be v1 or v2");
       }},
      {"model.cond_pos",
       [](RunConfig& c, const std::string& v, int l) {
         if (v == "head") c.model.cond_pos = CondPos::Head;
         else if (v == "middle") c.model.cond_pos = CondPos::Middle;
         else if (v == "tail") c.model.cond_pos = CondPos::Tail;
         else cfg_error(l, "cond_pos must be head, middle or tail");
       }},
      {"model.cond_type",
       [](RunConfig& c, const std::string& v, int l) {
         if (v == "class") c.model.cond_type = CondType::Class;
         else if (v == "text") c.model.cond_type = CondType::Text;
         else cfg_error(l, "cond_type must be class or text");
       }},
      {"model.classes", [](RunConfig& c, const std::string& v, int l) { c.model.n_classes = parse_int(v, l); }},
      {"model.text_len", [](RunConfig& c, const std::string& v, int l) { c.model.text_len = parse_int(v, l); }},
      {"model.codebook_size", [](RunConfig& c, const std::string& v, int l) { c.model.codebook_size = parse_int(v, l); }},
      {"model.grid_h", [](RunConfig& c, const std::string& v, int l) { c.model.grid_h = parse_int(v, l); }},
      {"model.grid_w", [](RunConfig& c, const std::string& v, int l) { c.model.grid_w = parse_int(v, l); }},
      {"model.d_state", [](RunConfig& c, const std::string& v, int l) { c.model.d_state = parse_int(v, l); }},
      {"model.conv_k_std", [](RunConfig& c, const std::string& v, int l) { c.model.conv_k_std = parse_int(v, l); }},
      {"model.conv_k_causal", [](RunConfig& c, const std::string& v, int l) { c.model.conv_k_causal = parse_int(v, l); }},
      {"model.parallel_scan", [](RunConfig& c, const std::string& v, int l) { c.model.parallel_scan = parse_bool(v, l); }},
      {"train.base_lr", [](RunConfig& c, const std::string& v, int l) { c.train.base_lr = parse_double(v, l); }},
      {"train.batch", [](RunConfig& c, const std::string& v, int l) { c.train.batch = parse_int(v, l); }},
      {"train.epochs", [](RunConfig& c, const std::string& v, int l) { c.train.epochs = parse_int(v, l); }},
      {"train.warmup_epochs", [](RunConfig& c, const std::string& v, int l) { c.train.warmup_epochs = parse_int(v, l); }},
      {"train.weight_decay", [](RunConfig& c, const std::string& v, int l) { c.train.weight_decay = parse_double(v, l); }},
      {"train.beta1", [](RunConfig& c, const std::string& v, int l) { c.train.beta1 = parse_double(v, l); }},
      {"train.beta2", [](RunConfig& c, const std::string& v, int l) { c.train.beta2 = parse_double(v, l); }},
      {"train.ema_decay", [](RunConfig& c, const std::string& v, int l) { c.train.ema_decay = parse_double(v, l); }},
      {"train.cond_dropout", [](RunConfig& c, const std::string& v, int l) { c.train.cond_dropout = parse_double(v, l); }},
      {"train.mask_min", [](RunConfig& c, const std::string& v, int l) { c.train.mask.ratio_min = parse_double(v, l); }},
      {"train.mask_max", [](RunConfig& c, const std::string& v, int l) { c.train.mask.ratio_max = parse_double(v, l); }},
      {"train.max_steps", [](RunConfig& c, const std::string& v, int l) { c.train.max_steps = parse_int(v, l); }},
      {"train.checkpoint_every", [](RunConfig& c, const std::string& v, int l) { c.train.checkpoint_every = parse_int(v, l); }},
      {"train.log_every", [](RunConfig& c, const std::string& v, int l) { c.train.log_every = parse_int(v, l); }},
      {"decode.steps", [](RunConfig& c, const std::string& v, int l) { c.decode.steps = parse_int(v, l); }},
      {"decode.cfg", [](RunConfig& c, const std::string& v, int l) { c.decode.cfg_scale = parse_double(v, l); }},
      {"decode.temperature", [](RunConfig& c, const std::string& v, int l) { c.decode.temperature = parse_double(v, l); }},
      {"decode.seed", [](RunConfig& c, const std::string& v, int l) { c.decode.seed = parse_u64(v, l); }},
      {"data.dataset", [](RunConfig& c, const std::string& v, int) { c.dataset_dir = v; }},
      {"data.codebook", [](RunConfig& c, const std::string& v, int) { c.codebook_path = v; }},
      {"data.out_dir", [](RunConfig& c, const std::string& v, int) { c.out_dir = v; }},
      {"run.seed", [](RunConfig& c, const std::string& v, int l) { c.seed = parse_u64(v, l); }},
      {"run.precision",
       [](RunConfig& c, const std::string& v, int l) {
         if (v == "f32") c.precision = Precision::F32;
         else if (v == "f64") c.precision = Precision::F64;
         else cfg_error(l, "precision must be f32 or f64");
       }},
  };

  static const std::map<std::string, bool> known_sections = {
      {"model", true}, {"train", true}, {"decode", true}, {"data", true}, {"run", true}};

  std::istringstream is(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    std::string line = raw;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') cfg_error(line_no, "malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (!known_sections.count(section)) cfg_error(line_no, "unknown section '" + section + "'");
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) cfg_error(line_no, "expected key = value, got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty()) cfg_error(line_no, "key '" + key + "' appears before any section");
    auto it = handlers.find(section + "." + key);
    if (it == handlers.end())
      cfg_error(line_no, "unknown key '" + key + "' in section [" + section + "]");
    it->second(cfg, value, line_no);
  }
  cfg.model.validate();
  cfg.train.mask.validate();
  cfg.decode.validate();
  if (cfg.train.cond_dropout < 0.0 || cfg.train.cond_dropout > 1.0)
    throw std::invalid_argument("train.cond_dropout must be in [0,1]");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "[model]\n";
  os << "layers = " << c.model.n_layers << "\n";
  os << "hidden = " << c.model.hidden << "\n";
  os << "scheme = " << to_string(c.model.scheme) << "\n";
  os << "mamba = " << to_string(c.model.mamba) << "\n";
  os << "cond_pos = " << to_string(c.model.cond_pos) << "\n";
  os << "cond_type = " << to_string(c.model.cond_type) << "\n";
  os << "classes = " << c.model.n_classes << "\n";
  os << "text_len = " << c.model.text_len << "\n";
  os << "codebook_size = " << c.model.codebook_size << "\n";
  os << "grid_h = " << c.model.grid_h << "\n";
  os << "grid_w = " << c.model.grid_w << "\n";
  os << "d_state = " << c.model.d_state << "\n";
  os << "conv_k_std = " << c.model.conv_k_std << "\n";
  os << "conv_k_causal = " << c.model.conv_k_causal << "\n";
  os << "parallel_scan = " << (c.model.parallel_scan ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "base_lr = " << c.train.base_lr << "\n";
  os << "batch = " << c.train.batch << "\n";
  os << "epochs = " << c.train.epochs << "\n";
  os << "warmup_epochs = " << c.train.warmup_epochs << "\n";
  os << "weight_decay = " << c.train.weight_decay << "\n";
  os << "beta1 = " << c.train.beta1 << "\n";
  os << "beta2 = " << c.train.beta2 << "\n";
  os << "ema_decay = " << c.train.ema_decay << "\n";
  os << "cond_dropout = " << c.train.cond_dropout << "\n";
  os << "mask_min = " << c.train.mask.ratio_min << "\n";
  os << "mask_max = " << c.train.mask.ratio_max << "\n";
  os << "max_steps = " << c.train.max_steps << "\n";
  os << "checkpoint_every = " << c.train.checkpoint_every << "\n";
  os << "log_every = " << c.train.log_every << "\n";
  os << "\n[decode]\n";
  os << "steps = " << c.decode.steps << "\n";
  os << "cfg = " << c.decode.cfg_scale << "\n";
  os << "temperature = " << c.decode.temperature << "\n";
  os << "seed = " << c.decode.seed << "\n";
  os << "\n[data]\n";
  os << "dataset = " << c.dataset_dir << "\n";
  os << "codebook = " << c.codebook_path << "\n";
  os << "out_dir = " << c.out_dir << "\n";
  os << "\n[run]\n";
  os << "seed = " << c.seed << "\n";
  os << "precision = " << to_string(c.precision) << "\n";
  return os.str();
}

Precision default_precision() {
  const char* env = std::getenv("MASKMAMBA_PRECISION");
  if (env == nullptr) return Precision::F32;
  std::string v(env);
  if (v == "f64") return Precision::F64;
  if (v == "f32" || v.empty()) return Precision::F32;
  throw std::invalid_argument("MASKMAMBA_PRECISION must be f32 or f64, got '" + v + "'");
}

}  // namespace maskmamba
