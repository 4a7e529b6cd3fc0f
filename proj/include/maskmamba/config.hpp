#pragma once

#include <cstdint>
#include <string>

#include "maskmamba/tensor.hpp"

namespace maskmamba {

enum class SchemeKind { PureMamba, PureTransformer, GroupV1, GroupV2, SerialV1, SerialV2 };
enum class MambaVariant { V1, V2 };
enum class CondPos { Head, Middle, Tail };
enum class CondType { Class, Text };
enum class Precision { F32, F64 };

std::string to_string(SchemeKind k);
std::string to_string(MambaVariant v);
std::string to_string(CondPos p);
std::string to_string(CondType t);
std::string to_string(Precision p);

struct ModelConfig {
  Index n_layers = 4;
  Index hidden = 64;  // C
  SchemeKind scheme = SchemeKind::SerialV2;
  MambaVariant mamba = MambaVariant::V2;
  CondPos cond_pos = CondPos::Middle;
  CondType cond_type = CondType::Class;
  Index n_classes = 8;
  Index text_len = 120;  // N
  Index codebook_size = 64;  // K
  Index grid_h = 8;
  Index grid_w = 8;
  Index d_state = 16;
  Index conv_k_std = 3;
  Index conv_k_causal = 4;
  bool parallel_scan = false;

  Index vocab_size() const { return codebook_size + 1; }  // codebook ids plus [M]
  Index mask_token_id() const { return codebook_size; }
  Index n_image_tokens() const { return grid_h * grid_w; }
  Index cond_len() const { return cond_type == CondType::Class ? 1 : text_len; }
  Index seq_len() const { return n_image_tokens() + cond_len(); }

  void validate() const;
};

struct MaskSpec {
  double ratio_min = 0.5;
  double ratio_max = 1.0;

  void validate() const;
};

struct TrainConfig {
  double base_lr = 1e-4;  // per 256 global batch, scaled linearly
  Index batch = 32;
  Index epochs = 300;
  Index warmup_epochs = 1;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double ema_decay = 0.999;
  double cond_dropout = 0.1;
  MaskSpec mask;
  Index max_steps = 0;  // 0: run epochs * steps_per_epoch
  Index checkpoint_every = 0;  // steps between periodic checkpoints; 0: final only
  Index log_every = 1;

  double peak_lr() const { return base_lr * static_cast<double>(batch) / 256.0; }
};

struct DecodeConfig {
  Index steps = 20;  // T
  double cfg_scale = 3.0;  // s
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DecodeConfig decode;
  std::string dataset_dir;
  std::string codebook_path;
  std::string out_dir = "runs/out";
  std::uint64_t seed = 0;
  Precision precision = Precision::F32;
};

// Linear warmup to the peak over warmup_steps, then cosine decay to exactly
// zero at total_steps.
struct LrSchedule {
  double peak = 0.0;
  Index warmup_steps = 0;
  Index total_steps = 1;

  double at(Index step) const;
};

// Sectioned key=value text. Unknown sections or keys are errors reporting the
// line number; '#' starts a comment. Schema in docs/formats.md.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

// MASKMAMBA_PRECISION (f32|f64) when set, else f32.
Precision default_precision();

}  // namespace maskmamba
