#pragma once

// Parameter checkpoints: <prefix>.bin holds every parameter as little-endian
// f64 in CodeVaeModel::parameters() order (each matrix row-major);
// <prefix>.manifest is key=value text with the architecture, the layer
// shapes and caller-supplied metadata (seed, step count, ...).

#include <cstdio>
#include <fstream>
#include <string>

#include "codevae/dataset.hpp"
#include "codevae/kvfile.hpp"
#include "codevae/model.hpp"

namespace codevae {

struct Checkpoint {
  CodeVaeModel model;
  KeyValues meta;
};

inline void save_checkpoint(const CodeVaeModel& model, const KeyValues& meta, const std::string& prefix) {
  KeyValues kv = meta;
  const auto& cfg = model.config();
  kv["format"] = "codevae-checkpoint-1";
  kv["modalities"] = std::to_string(cfg.modalities());
  kv["dims"] = detail::join(cfg.dims, [](int d) { return std::to_string(d); });
  kv["likelihoods"] = detail::join(cfg.families, [](Likelihood l) { return to_string(l); });
  kv["latent_dim"] = std::to_string(cfg.latent_dim);
  kv["hidden"] = detail::join(cfg.hidden, [](int d) { return std::to_string(d); });
  kv["rho"] = format_real(cfg.rho);

  std::string bin;
  const auto params = model.parameters();
  kv["param_count"] = std::to_string(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = *params[i];
    char key[32];
    std::snprintf(key, sizeof key, "shape.%03zu", i);
    kv[key] = std::to_string(p.rows()) + "x" + std::to_string(p.cols());
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c) detail::put_f64(bin, p(r, c));
  }
  kv["checksum"] = std::to_string(detail::fnv1a(bin));

  std::ofstream out(prefix + ".bin", std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + prefix + ".bin'");
  out.write(bin.data(), static_cast<std::streamsize>(bin.size()));
  if (!out) throw FormatError("write failed for '" + prefix + ".bin'");
  write_key_values(kv, prefix + ".manifest");
}

inline Checkpoint load_checkpoint(const std::string& prefix) {
  const KeyValues kv = read_key_values(prefix + ".manifest");
  auto get = [&](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint manifest lacks '" + k + "'");
    return it->second;
  };
  if (get("format") != "codevae-checkpoint-1") throw FormatError("checkpoint: unknown format");

  ModelConfig cfg;
  try {
    for (const auto& d : detail::split(get("dims"), ',')) cfg.dims.push_back(std::stoi(d));
    for (const auto& f : detail::split(get("likelihoods"), ',')) cfg.families.push_back(likelihood_from_string(f));
    cfg.latent_dim = std::stoi(get("latent_dim"));
    cfg.rho = std::stod(get("rho"));
    cfg.hidden.clear();
    for (const auto& h : detail::split(get("hidden"), ',')) cfg.hidden.push_back(std::stoi(h));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest (") + e.what() + ")");
  }

  CodeVaeModel model = [&] {
    try {
      return CodeVaeModel(cfg, 0);
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }();
  const std::string bin = detail::read_file(prefix + ".bin");
  auto params = model.parameters();
  if (get("param_count") != std::to_string(params.size())) throw FormatError("checkpoint: parameter count mismatch");

  std::size_t expected = 0;
  for (const Matrix* p : params) expected += static_cast<std::size_t>(p->size()) * 8;
  if (bin.size() != expected) throw FormatError("checkpoint: payload size does not match architecture");
  if (get("checksum") != std::to_string(detail::fnv1a(bin))) throw FormatError("checkpoint: checksum mismatch");

  std::size_t pos = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    char key[32];
    std::snprintf(key, sizeof key, "shape.%03zu", i);
    if (get(key) != std::to_string(p.rows()) + "x" + std::to_string(p.cols())) {
      throw FormatError("checkpoint: shape mismatch for parameter " + std::to_string(i));
    }
    for (Eigen::Index r = 0; r < p.rows(); ++r)
      for (Eigen::Index c = 0; c < p.cols(); ++c, pos += 8) p(r, c) = detail::get_f64(bin, pos);
  }
  return {std::move(model), kv};
}

}  // namespace codevae
