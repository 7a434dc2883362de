#pragma once

// Experiment configuration: a strict JSON document. Unknown keys are
// rejected at every level; seed, clients and rounds have no defaults.
//
// {
//   "seed": 7, "clients": 15, "rounds": 90,
//   "aggregation": "weighted_k",            // fedavg_uniform | fedavg_sized | weighted_k
//   "threads": 1, "record_wall_time": false, "test_fraction": 0.2,
//   "model":    {"d_z": 16, "activation": "tanh", "spectral_clip": 0.9},
//   "solver":   {"method": "anderson", "max_iters": 10, "tol": 1e-8,
//                "anderson_m": 5, "beta": 1.0, "ls_lambda": 1e-8},
//   "training": {"epochs": 5, "batch_size": 32, "lr": 0.05,
//                "k": 10,                   // or one count per client
//                "eval_iters": 10, "report_tol": 1e-3},
//   "data":     {"source": "blobs", "classes": 3, "per_class": 250, "dim": 2, "spread": 0.5}
//            |  {"source": "idx", "images": "...", "labels": "...", "limit": 0},
//   "partition": {"scheme": "iid"} | {"scheme": "dirichlet", "alpha": 0.25},
//   "output":   {"csv": "metrics.csv", "summary": "summary.json", "checkpoint": "model.bin"}
// }

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "deqfl/data.hpp"
#include "deqfl/deq.hpp"
#include "deqfl/errors.hpp"
#include "deqfl/federation.hpp"
#include "deqfl/model.hpp"

namespace deqfl {

using json = nlohmann::json;

struct BlobsSource {
  std::size_t classes = 3;
  std::size_t per_class = 250;
  std::size_t dim = 2;
  double spread = 0.5;

  friend bool operator==(const BlobsSource&, const BlobsSource&) = default;
};

struct IdxSource {
  std::string images;
  std::string labels;
  std::size_t limit = 0;

  friend bool operator==(const IdxSource&, const IdxSource&) = default;
};

enum class PartitionScheme { iid, dirichlet };

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::iid;
  double alpha = 0.25;

  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

struct OutputPaths {
  std::string csv = "metrics.csv";
  std::string summary = "summary.json";
  std::optional<std::string> checkpoint;

  friend bool operator==(const OutputPaths&, const OutputPaths&) = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t clients = 0;
  std::size_t rounds = 0;
  Aggregation aggregation = Aggregation::weighted_k;
  std::size_t threads = 1;
  bool record_wall_time = false;
  double test_fraction = 0.2;

  std::size_t d_z = 16;
  Activation activation = Activation::tanh;
  std::optional<double> spectral_clip = 0.9;

  SolverConfig solver;

  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.05;
  std::vector<std::size_t> k;  // one per client
  std::size_t eval_iters = 10;
  double report_tol = 1e-3;

  std::optional<BlobsSource> blobs;
  std::optional<IdxSource> idx;
  PartitionSpec partition;
  OutputPaths output;

  ModelDims model_dims() const {
    ModelDims d;
    d.d_z = d_z;
    d.d_x = blobs ? blobs->dim : 28 * 28;
    d.classes = blobs ? blobs->classes : 10;
    d.activation = activation;
    d.spectral_clip = spectral_clip;
    return d;
  }

  FederationConfig federation() const {
    FederationConfig f;
    f.rounds = rounds;
    f.aggregation = aggregation;
    f.seed = seed;
    f.threads = threads;
    f.report_tol = report_tol;
    f.eval_iters = eval_iters;
    f.record_wall_time = record_wall_time;
    for (std::size_t c = 0; c < clients; ++c) f.clients.push_back({c, k[c], epochs, batch_size, lr});
    return f;
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where.empty() ? "<root>" : where, "must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items())
    if (!ok.contains(key)) throw ConfigError(where.empty() ? key : where + "." + key, "unknown key");
}

inline std::string join(const std::string& where, const char* key) { return where.empty() ? key : where + "." + key; }

inline const json* find(const json& obj, const char* key) {
  auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline std::size_t get_count(const json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(field, "must be a non-negative integer");
  return v.get<std::size_t>();
}

inline double get_real(const json& v, const std::string& field) {
  if (!v.is_number()) throw ConfigError(field, "must be a number");
  return v.get<double>();
}

inline std::string get_string(const json& v, const std::string& field) {
  if (!v.is_string()) throw ConfigError(field, "must be a string");
  return v.get<std::string>();
}

inline bool get_bool(const json& v, const std::string& field) {
  if (!v.is_boolean()) throw ConfigError(field, "must be a boolean");
  return v.get<bool>();
}

template <typename T, typename Get>
void read_opt(const json& obj, const std::string& where, const char* key, T& dst, Get get) {
  if (const json* v = find(obj, key)) dst = get(*v, join(where, key));
}

inline const json& require(const json& obj, const std::string& where, const char* key) {
  const json* v = find(obj, key);
  if (!v) throw ConfigError(join(where, key), "required");
  return *v;
}

// Re-raise a component's ConfigError with its key path prefixed.
template <typename F>
void with_prefix(const std::string& prefix, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = std::string(e.what()).substr(e.field().size() + 2);
    throw ConfigError(prefix + "." + e.field(), msg);
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  using namespace detail;
  reject_unknown(root, "", {"seed", "clients", "rounds", "aggregation", "threads", "record_wall_time",
                            "test_fraction", "model", "solver", "training", "data", "partition", "output"});
  ExperimentConfig c;
  {
    const json& s = require(root, "", "seed");
    if (!s.is_number_integer() || s.get<long long>() < 0) throw ConfigError("seed", "must be a non-negative integer");
    c.seed = s.get<std::uint64_t>();
  }
  c.clients = get_count(require(root, "", "clients"), "clients");
  c.rounds = get_count(require(root, "", "rounds"), "rounds");
  if (c.clients < 1) throw ConfigError("clients", "must be >= 1");
  if (c.rounds < 1) throw ConfigError("rounds", "must be >= 1");
  if (const json* a = find(root, "aggregation")) {
    c.aggregation = aggregation_from_string(get_string(*a, "aggregation"));
  }
  read_opt(root, "", "threads", c.threads, get_count);
  read_opt(root, "", "record_wall_time", c.record_wall_time, get_bool);
  read_opt(root, "", "test_fraction", c.test_fraction, get_real);
  if (c.threads < 1) throw ConfigError("threads", "must be >= 1");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) throw ConfigError("test_fraction", "must lie in (0, 1)");

  if (const json* m = find(root, "model")) {
    reject_unknown(*m, "model", {"d_z", "activation", "spectral_clip"});
    read_opt(*m, "model", "d_z", c.d_z, get_count);
    if (const json* a = find(*m, "activation")) {
      with_prefix("model", [&] { c.activation = activation_from_string(get_string(*a, "activation")); });
    }
    if (const json* s = find(*m, "spectral_clip")) {
      if (s->is_null())
        c.spectral_clip.reset();
      else
        c.spectral_clip = get_real(*s, "model.spectral_clip");
    }
  }

  if (const json* s = find(root, "solver")) {
    reject_unknown(*s, "solver", {"method", "max_iters", "tol", "anderson_m", "beta", "ls_lambda"});
    if (const json* m = find(*s, "method")) {
      with_prefix("solver", [&] { c.solver.method = solver_method_from_string(get_string(*m, "method")); });
    }
    read_opt(*s, "solver", "max_iters", c.solver.max_iters, get_count);
    read_opt(*s, "solver", "tol", c.solver.tol, get_real);
    read_opt(*s, "solver", "anderson_m", c.solver.anderson_m, get_count);
    read_opt(*s, "solver", "beta", c.solver.beta, get_real);
    read_opt(*s, "solver", "ls_lambda", c.solver.ls_lambda, get_real);
  }
  with_prefix("solver", [&] { c.solver.validate(); });

  c.k.assign(c.clients, 10);
  if (const json* t = find(root, "training")) {
    reject_unknown(*t, "training", {"epochs", "batch_size", "lr", "k", "eval_iters", "report_tol"});
    read_opt(*t, "training", "epochs", c.epochs, get_count);
    read_opt(*t, "training", "batch_size", c.batch_size, get_count);
    read_opt(*t, "training", "lr", c.lr, get_real);
    read_opt(*t, "training", "eval_iters", c.eval_iters, get_count);
    read_opt(*t, "training", "report_tol", c.report_tol, get_real);
    if (const json* k = find(*t, "k")) {
      if (k->is_array()) {
        if (k->size() != c.clients) throw ConfigError("training.k", "needs one entry per client");
        for (std::size_t i = 0; i < c.clients; ++i) c.k[i] = get_count((*k)[i], "training.k[" + std::to_string(i) + "]");
      } else {
        c.k.assign(c.clients, get_count(*k, "training.k"));
      }
    }
  }
  if (c.epochs < 1) throw ConfigError("training.epochs", "must be >= 1");
  if (c.batch_size < 1) throw ConfigError("training.batch_size", "must be >= 1");
  if (!(c.lr >= 0.0)) throw ConfigError("training.lr", "must be >= 0");
  if (c.eval_iters < 1) throw ConfigError("training.eval_iters", "must be >= 1");
  if (!(c.report_tol > 0.0)) throw ConfigError("training.report_tol", "must be > 0");
  for (std::size_t i = 0; i < c.k.size(); ++i)
    if (c.k[i] < 1) throw ConfigError("training.k[" + std::to_string(i) + "]", "must be >= 1");

  {
    const json& d = require(root, "", "data");
    if (!d.is_object()) throw ConfigError("data", "must be an object");
    const std::string source = get_string(require(d, "data", "source"), "data.source");
    if (source == "blobs") {
      reject_unknown(d, "data", {"source", "classes", "per_class", "dim", "spread"});
      BlobsSource b;
      read_opt(d, "data", "classes", b.classes, get_count);
      read_opt(d, "data", "per_class", b.per_class, get_count);
      read_opt(d, "data", "dim", b.dim, get_count);
      read_opt(d, "data", "spread", b.spread, get_real);
      if (b.classes < 2) throw ConfigError("data.classes", "must be >= 2");
      if (b.per_class < 1) throw ConfigError("data.per_class", "must be >= 1");
      if (b.dim < 1) throw ConfigError("data.dim", "must be >= 1");
      if (!(b.spread > 0.0)) throw ConfigError("data.spread", "must be > 0");
      c.blobs = b;
    } else if (source == "idx") {
      reject_unknown(d, "data", {"source", "images", "labels", "limit"});
      IdxSource s;
      s.images = get_string(require(d, "data", "images"), "data.images");
      s.labels = get_string(require(d, "data", "labels"), "data.labels");
      read_opt(d, "data", "limit", s.limit, get_count);
      c.idx = s;
    } else {
      throw ConfigError("data.source", "must be 'blobs' or 'idx'");
    }
  }

  if (const json* p = find(root, "partition")) {
    reject_unknown(*p, "partition", {"scheme", "alpha"});
    const std::string scheme = get_string(require(*p, "partition", "scheme"), "partition.scheme");
    if (scheme == "iid") {
      c.partition.scheme = PartitionScheme::iid;
      if (find(*p, "alpha")) throw ConfigError("partition.alpha", "only valid with scheme 'dirichlet'");
    } else if (scheme == "dirichlet") {
      c.partition.scheme = PartitionScheme::dirichlet;
      c.partition.alpha = get_real(require(*p, "partition", "alpha"), "partition.alpha");
      if (!(c.partition.alpha > 0.0)) throw ConfigError("partition.alpha", "must be > 0");
    } else {
      throw ConfigError("partition.scheme", "must be 'iid' or 'dirichlet'");
    }
  }

  if (const json* o = find(root, "output")) {
    reject_unknown(*o, "output", {"csv", "summary", "checkpoint"});
    read_opt(*o, "output", "csv", c.output.csv, get_string);
    read_opt(*o, "output", "summary", c.output.summary, get_string);
    if (const json* ck = find(*o, "checkpoint")) c.output.checkpoint = get_string(*ck, "output.checkpoint");
  }

  c.model_dims().validate();
  return c;
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(root);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open '" + path + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config_text(text);
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["clients"] = c.clients;
  j["rounds"] = c.rounds;
  j["aggregation"] = std::string(to_string(c.aggregation));
  j["threads"] = c.threads;
  j["record_wall_time"] = c.record_wall_time;
  j["test_fraction"] = c.test_fraction;
  j["model"] = {{"d_z", c.d_z}, {"activation", std::string(to_string(c.activation))}};
  j["model"]["spectral_clip"] = c.spectral_clip ? json(*c.spectral_clip) : json(nullptr);
  j["solver"] = {{"method", std::string(to_string(c.solver.method))},
                 {"max_iters", c.solver.max_iters},
                 {"tol", c.solver.tol},
                 {"anderson_m", c.solver.anderson_m},
                 {"beta", c.solver.beta},
                 {"ls_lambda", c.solver.ls_lambda}};
  j["training"] = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr},
                   {"k", c.k},           {"eval_iters", c.eval_iters}, {"report_tol", c.report_tol}};
  if (c.blobs)
    j["data"] = {{"source", "blobs"},
                 {"classes", c.blobs->classes},
                 {"per_class", c.blobs->per_class},
                 {"dim", c.blobs->dim},
                 {"spread", c.blobs->spread}};
  else if (c.idx)
    j["data"] = {{"source", "idx"}, {"images", c.idx->images}, {"labels", c.idx->labels}, {"limit", c.idx->limit}};
  if (c.partition.scheme == PartitionScheme::iid)
    j["partition"] = {{"scheme", "iid"}};
  else
    j["partition"] = {{"scheme", "dirichlet"}, {"alpha", c.partition.alpha}};
  j["output"] = {{"csv", c.output.csv}, {"summary", c.output.summary}};
  if (c.output.checkpoint) j["output"]["checkpoint"] = *c.output.checkpoint;
  return j;
}

struct Experiment {
  Dataset train;
  Dataset test;
  Partition partition;
  DeqClassifier model0;
  FederationConfig federation;
};

inline Dataset load_dataset(const ExperimentConfig& c) {
  if (c.blobs) return gen_blobs(c.blobs->classes, c.blobs->per_class, c.blobs->dim, c.blobs->spread, c.seed);
  return load_idx(c.idx->images, c.idx->labels, c.idx->limit);
}

inline Partition make_partition(const ExperimentConfig& c, const Dataset& train) {
  return c.partition.scheme == PartitionScheme::iid ? partition_iid(train, c.clients, c.seed)
                                                   : partition_dirichlet(train, c.clients, c.partition.alpha, c.seed);
}

// Data, held-out split (before partitioning), partition and initial model.
inline Experiment prepare_experiment(const ExperimentConfig& c) {
  Dataset all = load_dataset(c);
  all.validate();
  const ModelDims dims = c.model_dims();
  if (all.dim() != dims.d_x)
    throw DataError("dataset has " + std::to_string(all.dim()) + " features, model expects " +
                    std::to_string(dims.d_x));
  TrainTest split = stratified_split(all, c.test_fraction, c.seed);
  Partition p = make_partition(c, split.train);
  DeqClassifier m0 = init_classifier(dims, c.solver, c.seed);
  return {std::move(split.train), std::move(split.test), std::move(p), std::move(m0), c.federation()};
}

}  // namespace deqfl
