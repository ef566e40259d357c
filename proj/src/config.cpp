#include "mxacl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace mxacl {
namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ValidationError(where + ": unknown key \"" + k + "\"");
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  regime.validate();
  if (!preset.empty()) ablation_preset(preset, RegimeConfig{});
  if (synth.has_value() == !data_dir.empty()) {
    throw ValidationError("run config: exactly one of data.synth and data.dir is required");
  }
  if (synth) synth->validate();
  if (out_dir.empty()) throw ValidationError("run config: out must not be empty");
  if (seeds.empty()) throw ValidationError("run config: seeds must not be empty");
  const std::set<std::uint64_t> unique(seeds.begin(), seeds.end());
  if (unique.size() != seeds.size()) throw ValidationError("run config: seeds must be distinct");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  nlohmann::json data = nlohmann::json::object();
  if (c.synth) data["synth"] = *c.synth;
  if (!c.data_dir.empty()) data["dir"] = c.data_dir;
  j = {{"model", c.model}, {"regime", c.regime}, {"data", data}, {"out", c.out_dir}, {"seeds", c.seeds}};
  if (!c.preset.empty()) j["preset"] = c.preset;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown(j, {"model", "preset", "regime", "data", "out", "seeds"}, "run config");
  RunConfig c;
  try {
    if (j.contains("model")) from_json(j.at("model"), c.model);
    if (j.contains("preset")) {
      c.preset = j.at("preset").get<std::string>();
      c.regime = ablation_preset(c.preset, c.regime);
    }
    if (j.contains("regime")) from_json(j.at("regime"), c.regime);
    if (j.contains("data")) {
      const nlohmann::json& d = j.at("data");
      reject_unknown(d, {"synth", "dir"}, "run config data");
      if (d.contains("synth")) c.synth = d.at("synth").get<SynthSpec>();
      if (d.contains("dir")) c.data_dir = d.at("dir").get<std::string>();
    }
    if (j.contains("out")) c.out_dir = j.at("out").get<std::string>();
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run config: ") + e.what());
  }
  return c;
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read error on " + path.string());
  try {
    return nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_json_file(path)); }

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write error on " + path.string());
}

Dataset load_run_data(const RunConfig& c) {
  if (c.synth) return generate_synthetic(*c.synth);
  if (c.data_dir.empty()) throw ValidationError("run config: no data source");
  return load_dataset_dir(c.data_dir);
}

void fit_model_to_data(RunConfig& c, const Dataset& data) { c.model.n_classes = data.label_names.size(); }

}  // namespace mxacl
