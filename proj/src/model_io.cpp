// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "lwr/model.hpp"

namespace lwr {

namespace {

constexpr char kMagic[4] = {'L', 'C', 'R', 'M'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

void write_tensor(std::ostream& os, const std::string& name, const Mat<float>& m) {
  write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(os, 2);
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols));
  os.write(reinterpret_cast<const char*>(m.data.data()),
           static_cast<std::streamsize>(m.data.size() * sizeof(float)));
}

std::pair<std::string, Mat<float>> read_tensor(std::istream& is) {
  const auto name_len = read_pod<std::uint16_t>(is, "tensor name length");
  std::string name(name_len, '\0');
  is.read(name.data(), name_len);
  if (!is) throw ParseError("checkpoint: truncated tensor name");
  const auto rank = read_pod<std::uint32_t>(is, "tensor rank");
  if (rank != 2) throw ParseError("checkpoint: tensor " + name + " has unsupported rank");
  const auto rows = read_pod<std::uint64_t>(is, "rows");
  const auto cols = read_pod<std::uint64_t>(is, "cols");
  Mat<float> m(static_cast<int>(rows), static_cast<int>(cols));
  is.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(m.data.size() * sizeof(float)));
  if (!is) throw ParseError("checkpoint: truncated payload for tensor " + name);
  return {std::move(name), std::move(m)};
}

}  // namespace

ModelConfig make_config(ModelVariant variant, int L, int K) {
  ModelConfig cfg;
  switch (variant) {
    case ModelVariant::kTiny:
      cfg.layers = 4;
      cfg.hidden = 512;
      cfg.intermediate = 2048;
      cfg.heads = 8;
      cfg.window_radius = 1024 / 2;
      break;
    case ModelVariant::kSmall:
      cfg.layers = 6;
      cfg.hidden = 768;
      cfg.intermediate = 3072;
      cfg.heads = 12;
      cfg.window_radius = 512 / 2;
      break;
    case ModelVariant::kBase:
      cfg.layers = 12;
      cfg.hidden = 768;
      cfg.intermediate = 3072;
      cfg.heads = 12;
      cfg.window_radius = 512 / 2;
      break;
  }
  cfg.L = L;
  cfg.K = K;
  cfg.max_context = sequence_length(L, K);
  return cfg;
}

ModelVariant variant_from_name(const std::string& name) {
  if (name == "tiny") return ModelVariant::kTiny;
  if (name == "small") return ModelVariant::kSmall;
  if (name == "base") return ModelVariant::kBase;
  throw ConfigError("unknown model variant '" + name + "' (expected tiny|small|base)");
}

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["layers"] = cfg.layers;
  j["hidden"] = cfg.hidden;
  j["intermediate"] = cfg.intermediate;
  j["heads"] = cfg.heads;
  j["window_radius"] = cfg.window_radius;
  j["max_context"] = cfg.max_context;
  j["L"] = cfg.L;
  j["K"] = cfg.K;
  j["descriptor_dim"] = cfg.descriptor_dim;
  j["dropout_rate"] = cfg.dropout_rate;
  j["seed"] = cfg.seed;
  j["use_projection"] = cfg.use_projection;
  j["tie_global_projections"] = cfg.tie_global_projections;
  j["disable_global_attention"] = cfg.disable_global_attention;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  ModelConfig cfg;
  cfg.layers = j.at("layers").get<int>();
  cfg.hidden = j.at("hidden").get<int>();
  cfg.intermediate = j.at("intermediate").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.window_radius = j.at("window_radius").get<int>();
  cfg.max_context = j.at("max_context").get<int>();
  cfg.L = j.at("L").get<int>();
  cfg.K = j.at("K").get<int>();
  cfg.descriptor_dim = j.at("descriptor_dim").get<int>();
  cfg.dropout_rate = j.at("dropout_rate").get<float>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  cfg.use_projection = j.at("use_projection").get<bool>();
  cfg.tie_global_projections = j.at("tie_global_projections").get<bool>();
  cfg.disable_global_attention = j.at("disable_global_attention").get<bool>();
  return cfg;
}

void save_checkpoint(RerankerModel<float>& model, const std::string& path,
                     const CheckpointExtra* extra) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ParseError("checkpoint: cannot open " + tmp + " for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kCheckpointVersion);
    const std::string cfg = model_config_to_json(model.config);
    write_pod<std::uint64_t>(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    std::uint64_t count = 0;
    model.for_each_param([&](const std::string&, Mat<float>&, ParamKind) { ++count; });
    if (extra) count += extra->tensors.size() + 1;
    write_pod<std::uint64_t>(os, count);
    model.for_each_param([&](const std::string& name, Mat<float>& m, ParamKind) {
      write_tensor(os, name, m);
    });
    if (extra) {
      for (const auto& [name, m] : extra->tensors) write_tensor(os, name, m);
      Mat<float> step(1, 1);
      step.data[0] = static_cast<float>(extra->step);
      write_tensor(os, "opt.step", step);
    }
    if (!os) throw ParseError("checkpoint: write failure on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

RerankerModel<float> load_checkpoint(const std::string& path, CheckpointExtra* extra) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("checkpoint: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto cfg_len = read_pod<std::uint64_t>(is, "config length");
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw ParseError("checkpoint: truncated config blob");
  ModelConfig cfg = model_config_from_json(cfg_text);

  RerankerModel<float> model = init_model<float>(cfg);
  const auto count = read_pod<std::uint64_t>(is, "tensor count");
  std::vector<std::pair<std::string, Mat<float>>> tensors;
  tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) tensors.push_back(read_tensor(is));

  std::size_t used = 0;
  model.for_each_param([&](const std::string& name, Mat<float>& m, ParamKind) {
    for (auto& [tname, tm] : tensors) {
      if (tname == name) {
        if (!m.same_shape(tm)) {
          throw ParseError("checkpoint: tensor " + name + " has shape " + tm.shape_str() +
                           ", model expects " + m.shape_str());
        }
        m = tm;
        ++used;
        return;
      }
    }
    throw ParseError("checkpoint: missing tensor " + name);
  });
  if (extra) {
    extra->tensors.clear();
    for (auto& [tname, tm] : tensors) {
      if (tname == "opt.step") {
        extra->step = static_cast<long long>(tm.data[0]);
      } else if (tname.rfind("opt.", 0) == 0) {
        extra->tensors.emplace_back(tname, std::move(tm));
      }
    }
  }
  (void)used;
  return model;
}

}  // namespace lwr
