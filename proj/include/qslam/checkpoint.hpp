#pragma once

#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "qslam/common.hpp"
#include "qslam/transformer.hpp"

namespace qslam {

inline nlohmann::json transformer_config_to_json(const TransformerConfig& cfg) {
  nlohmann::json j;
  j["feat_dim"] = cfg.feat_dim;
  j["sem_dim"] = cfg.sem_dim;
  j["n_heads"] = cfg.n_heads;
  j["pe_bands"] = cfg.pe_bands;
  j["n_classes"] = cfg.n_classes;
  j["n_segment_ids"] = cfg.n_segment_ids;
  j["max_rays"] = cfg.max_rays;
  j["quadric_masking"] = cfg.quadric_masking;
  j["pos_scale"] = cfg.pos_scale;
  j["t_scale"] = cfg.t_scale;
  return j;
}

inline TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  TransformerConfig cfg;
  cfg.feat_dim = j.at("feat_dim").get<int>();
  cfg.sem_dim = j.at("sem_dim").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.pe_bands = j.at("pe_bands").get<int>();
  cfg.n_classes = j.at("n_classes").get<int>();
  cfg.n_segment_ids = j.at("n_segment_ids").get<int>();
  cfg.max_rays = j.at("max_rays").get<int>();
  cfg.quadric_masking = j.at("quadric_masking").get<bool>();
  cfg.pos_scale = j.at("pos_scale").get<double>();
  cfg.t_scale = j.at("t_scale").get<double>();
  cfg.validate();
  return cfg;
}

inline void save_checkpoint(const std::filesystem::path& path,
                            const TransformerParams& params) {
  nlohmann::json j;
  j["config"] = transformer_config_to_json(params.cfg);
  j["params"] = nlohmann::json::array();
  for (size_t i = 0; i < params.store.entries().size(); ++i) {
    const ParamStore::Entry& e = params.store.entries()[i];
    nlohmann::json pe;
    pe["name"] = e.name;
    pe["rows"] = e.rows;
    pe["cols"] = e.cols;
    const double* begin = params.store.values().data() + e.offset;
    pe["values"] = std::vector<double>(begin, begin + static_cast<size_t>(e.rows) * e.cols);
    j["params"].push_back(pe);
  }
  std::ofstream out(path);
  require(out.good(), ErrorKind::DataError, "cannot write " + path.string());
  out << j.dump() << "\n";
}

inline TransformerParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::DataError, "cannot read " + path.string());
  nlohmann::json j = nlohmann::json::parse(in);
  TransformerParams params(transformer_config_from_json(j.at("config")));
  const auto& arr = j.at("params");
  require(arr.size() == params.store.entries().size(), ErrorKind::DataError,
          "checkpoint has wrong parameter count");
  for (size_t i = 0; i < arr.size(); ++i) {
    const ParamStore::Entry& e = params.store.entries()[i];
    const nlohmann::json& pe = arr[i];
    require(pe.at("name").get<std::string>() == e.name &&
                pe.at("rows").get<int>() == e.rows &&
                pe.at("cols").get<int>() == e.cols,
            ErrorKind::DataError, "checkpoint entry mismatch at " + e.name);
    const auto& vals = pe.at("values");
    size_t n = static_cast<size_t>(e.rows) * e.cols;
    require(vals.size() == n, ErrorKind::DataError,
            "checkpoint value count mismatch at " + e.name);
    for (size_t k = 0; k < n; ++k)
      params.store.values()[static_cast<size_t>(e.offset) + k] = vals[k].get<double>();
  }
  return params;
}

}  // namespace qslam
