#pragma once

#include <functional>
#include <string>

#include <json.hpp>

#include "lsc/common.hpp"

namespace lsc {

struct ModelConfig {
  int n_domains = 6;
  int latent_dim = 64;  // domain-center code width
  int style_dim = 32;   // style vector width injected via adain
  int noise_dim = 16;
  int image_channels = 3;
  int image_size = 32;     // power of two, >= 4
  int base_channels = 16;  // conv width unit for G and the E/D trunk
  int mlp_hidden = 128;
  int f_input_dim = 64;  // learnable constant fed to the mapping network
};

struct DatasetConfig {
  std::string kind = "disks";  // disks | bars
  int n_domains = 6;           // mirrored from ModelConfig by RunConfig
  int image_channels = 3;
  int image_size = 32;
  double r_min = 3.0;
  double r_max = 12.0;
  double theta_range_deg = 150.0;
  double bg_lo = -0.9, bg_hi = -0.4;
  double fg_lo = 0.25, fg_hi = 0.95;
  double jitter_px = 2.0;
  double min_contrast = 0.25;  // oracle: below this, foreground is unmeasurable
  std::uint64_t seed = 0;      // base seed for cache/eval sample streams
};

struct LossWeights {
  double cdc = 1.0, tam = 1.0, ccc = 1.0;
  double sty = 1.0, ds = 1.0, cyc = 1.0;
};

struct TrainConfig {
  std::int64_t iterations = 20000;
  int batch = 8;
  double lr = 1e-4;
  double beta1 = 0.5, beta2 = 0.999, eps = 1e-8;
  double r1_gamma = 1.0;
  double r1_fd_step = 1e-2;       // step of the penalty's directional-derivative path
  std::int64_t ds_decay_iters = 20000;  // linear decay of the ds weight; 0 = constant
  std::uint64_t seed = 1;
  std::int64_t checkpoint_interval = 5000;
  std::int64_t metrics_interval = 100;
};

struct EvalConfig {
  int samples_per_domain = 50;
  int noises_per_source = 10;
  int diversity_sources = 16;
  int beyond_limit_steps = 3;
  int beyond_limit_sources = 16;
  int embed_noises_per_domain = 100;
  std::uint64_t seed = 9001;
};

struct RunConfig {
  ModelConfig model;
  DatasetConfig data;
  TrainConfig train;
  LossWeights loss;
  EvalConfig eval;
  std::string out_dir = "run_out";

  void validate() const;
};

namespace detail {

// Single registry of every flat dotted key; drives JSON parsing, CLI flags
// and the resolved-config echo.
struct ConfigVisitor {
  std::function<void(const char*, int&)> on_int;
  std::function<void(const char*, std::int64_t&)> on_int64;
  std::function<void(const char*, std::uint64_t&)> on_u64;
  std::function<void(const char*, double&)> on_double;
  std::function<void(const char*, std::string&)> on_string;
};

inline void visit_config(RunConfig& c, const ConfigVisitor& v) {
  v.on_int("model.n_domains", c.model.n_domains);
  v.on_int("model.latent_dim", c.model.latent_dim);
  v.on_int("model.style_dim", c.model.style_dim);
  v.on_int("model.noise_dim", c.model.noise_dim);
  v.on_int("model.image_channels", c.model.image_channels);
  v.on_int("model.image_size", c.model.image_size);
  v.on_int("model.base_channels", c.model.base_channels);
  v.on_int("model.mlp_hidden", c.model.mlp_hidden);
  v.on_int("model.f_input_dim", c.model.f_input_dim);

  v.on_string("data.kind", c.data.kind);
  v.on_double("data.r_min", c.data.r_min);
  v.on_double("data.r_max", c.data.r_max);
  v.on_double("data.theta_range_deg", c.data.theta_range_deg);
  v.on_double("data.bg_lo", c.data.bg_lo);
  v.on_double("data.bg_hi", c.data.bg_hi);
  v.on_double("data.fg_lo", c.data.fg_lo);
  v.on_double("data.fg_hi", c.data.fg_hi);
  v.on_double("data.jitter_px", c.data.jitter_px);
  v.on_double("data.min_contrast", c.data.min_contrast);
  v.on_u64("data.seed", c.data.seed);

  v.on_int64("train.iterations", c.train.iterations);
  v.on_int("train.batch", c.train.batch);
  v.on_double("train.lr", c.train.lr);
  v.on_double("train.beta1", c.train.beta1);
  v.on_double("train.beta2", c.train.beta2);
  v.on_double("train.eps", c.train.eps);
  v.on_double("train.r1_gamma", c.train.r1_gamma);
  v.on_double("train.r1_fd_step", c.train.r1_fd_step);
  v.on_int64("train.ds_decay_iters", c.train.ds_decay_iters);
  v.on_u64("train.seed", c.train.seed);
  v.on_int64("train.checkpoint_interval", c.train.checkpoint_interval);
  v.on_int64("train.metrics_interval", c.train.metrics_interval);

  v.on_double("loss.cdc", c.loss.cdc);
  v.on_double("loss.tam", c.loss.tam);
  v.on_double("loss.ccc", c.loss.ccc);
  v.on_double("loss.sty", c.loss.sty);
  v.on_double("loss.ds", c.loss.ds);
  v.on_double("loss.cyc", c.loss.cyc);

  v.on_int("eval.samples_per_domain", c.eval.samples_per_domain);
  v.on_int("eval.noises_per_source", c.eval.noises_per_source);
  v.on_int("eval.diversity_sources", c.eval.diversity_sources);
  v.on_int("eval.beyond_limit_steps", c.eval.beyond_limit_steps);
  v.on_int("eval.beyond_limit_sources", c.eval.beyond_limit_sources);
  v.on_int("eval.embed_noises_per_domain", c.eval.embed_noises_per_domain);
  v.on_u64("eval.seed", c.eval.seed);

  v.on_string("out_dir", c.out_dir);
}

}  // namespace detail

inline void RunConfig::validate() const {
  LSC_CHECK(model.n_domains >= 2, "config: model.n_domains must be >= 2");
  LSC_CHECK(model.latent_dim > 0 && model.style_dim > 0 && model.noise_dim > 0,
            "config: latent/style/noise dims must be positive");
  LSC_CHECK(model.image_size >= 4 && (model.image_size & (model.image_size - 1)) == 0,
            "config: model.image_size must be a power of two >= 4");
  LSC_CHECK(model.image_channels >= 1, "config: model.image_channels must be >= 1");
  LSC_CHECK(model.base_channels >= 1 && model.mlp_hidden >= 2 && model.f_input_dim >= 1,
            "config: network widths must be positive");
  LSC_CHECK(data.kind == "disks" || data.kind == "bars",
            "config: data.kind must be 'disks' or 'bars', got '" << data.kind << "'");
  LSC_CHECK(data.r_min < data.r_max, "config: data.r_min must be < data.r_max");
  LSC_CHECK(train.iterations >= 1, "config: train.iterations must be >= 1");
  LSC_CHECK(train.batch >= 1, "config: train.batch must be >= 1");
  LSC_CHECK(train.lr > 0, "config: train.lr must be > 0");
  LSC_CHECK(train.metrics_interval >= 1 && train.checkpoint_interval >= 1,
            "config: intervals must be >= 1");
  LSC_CHECK(loss.cdc >= 0 && loss.tam >= 0 && loss.ccc >= 0 && loss.sty >= 0 && loss.ds >= 0 &&
                loss.cyc >= 0,
            "config: loss weights must be >= 0");
}

// mirror shared fields after any mutation pass
inline void sync_config(RunConfig& c) {
  c.data.n_domains = c.model.n_domains;
  c.data.image_channels = c.model.image_channels;
  c.data.image_size = c.model.image_size;
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  RunConfig& c = const_cast<RunConfig&>(cfg);
  nlohmann::json j;
  detail::ConfigVisitor v;
  v.on_int = [&](const char* k, int& x) { j[k] = x; };
  v.on_int64 = [&](const char* k, std::int64_t& x) { j[k] = x; };
  v.on_u64 = [&](const char* k, std::uint64_t& x) { j[k] = x; };
  v.on_double = [&](const char* k, double& x) { j[k] = x; };
  v.on_string = [&](const char* k, std::string& x) { j[k] = x; };
  detail::visit_config(c, v);
  return j;
}

// Applies a flat {key: value} JSON object; rejects unknown keys and
// type-mismatched values.
inline void apply_json_to_config(const nlohmann::json& j, RunConfig& c) {
  LSC_CHECK(j.is_object(), "config: expected a JSON object of flat dotted keys");
  std::vector<std::string> seen;
  detail::ConfigVisitor v;
  auto mark = [&](const char* k) { seen.push_back(k); };
  v.on_int = [&](const char* k, int& x) {
    mark(k);
    if (j.contains(k)) {
      LSC_CHECK(j[k].is_number_integer(), "config: key '" << k << "' must be an integer");
      x = j[k].get<int>();
    }
  };
  v.on_int64 = [&](const char* k, std::int64_t& x) {
    mark(k);
    if (j.contains(k)) {
      LSC_CHECK(j[k].is_number_integer(), "config: key '" << k << "' must be an integer");
      x = j[k].get<std::int64_t>();
    }
  };
  v.on_u64 = [&](const char* k, std::uint64_t& x) {
    mark(k);
    if (j.contains(k)) {
      LSC_CHECK(j[k].is_number_unsigned() || j[k].is_number_integer(),
                "config: key '" << k << "' must be a non-negative integer");
      x = j[k].get<std::uint64_t>();
    }
  };
  v.on_double = [&](const char* k, double& x) {
    mark(k);
    if (j.contains(k)) {
      LSC_CHECK(j[k].is_number(), "config: key '" << k << "' must be a number");
      x = j[k].get<double>();
    }
  };
  v.on_string = [&](const char* k, std::string& x) {
    mark(k);
    if (j.contains(k)) {
      LSC_CHECK(j[k].is_string(), "config: key '" << k << "' must be a string");
      x = j[k].get<std::string>();
    }
  };
  detail::visit_config(c, v);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const auto& s : seen)
      if (s == it.key()) {
        known = true;
        break;
      }
    LSC_CHECK(known, "config: unknown key '" << it.key() << "'");
  }
  sync_config(c);
}

}  // namespace lsc
