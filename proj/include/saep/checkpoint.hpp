#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "json.hpp"
#include "saep/error.hpp"
#include "saep/npy.hpp"
#include "saep/projector.hpp"

namespace saep {

namespace detail {
inline std::int64_t json_int(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  require(v.is_number_integer(), Errc::format,
          std::string("config key '") + key + "' must be an integer");
  return v.get<std::int64_t>();
}

inline bool json_bool(const nlohmann::json& j, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  require(j.at(key).is_boolean(), Errc::format,
          std::string("config key '") + key + "' must be a boolean");
  return j.at(key).get<bool>();
}
}  // namespace detail

/// Config keys: {h, w, c, k, c_hid, stride, d, use_multi_level, use_depthwise,
/// use_pooling, seed}. Dimensions are required except c_hid (defaults to c);
/// flags default true, seed defaults 0. Unknown keys are rejected.
inline SaepConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), Errc::format, "config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"h",     "w",      "c",
                                  "k",     "c_hid",  "stride",
                                  "d",     "use_multi_level", "use_depthwise",
                                  "use_pooling", "seed"};
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    require(ok, Errc::format, "unknown config key '" + key + "'");
  }

  SaepConfig cfg;
  try {
    cfg.h = detail::json_int(j, "h");
    cfg.w = detail::json_int(j, "w");
    cfg.c = detail::json_int(j, "c");
    cfg.k = detail::json_int(j, "k");
    cfg.stride = detail::json_int(j, "stride");
    cfg.d = detail::json_int(j, "d");
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("config is missing a required key: ") + e.what());
  }
  cfg.c_hid = j.contains("c_hid") ? detail::json_int(j, "c_hid") : 0;
  cfg.use_multi_level = detail::json_bool(j, "use_multi_level", true);
  cfg.use_depthwise = detail::json_bool(j, "use_depthwise", true);
  cfg.use_pooling = detail::json_bool(j, "use_pooling", true);
  if (j.contains("seed")) {
    const std::int64_t s = detail::json_int(j, "seed");
    require(s >= 0, Errc::format, "config key 'seed' must be non-negative");
    cfg.seed = static_cast<std::uint64_t>(s);
  }
  return cfg;
}

inline nlohmann::json config_to_json(const SaepConfig& cfg) {
  return nlohmann::json{{"h", cfg.h},
                        {"w", cfg.w},
                        {"c", cfg.c},
                        {"k", cfg.k},
                        {"c_hid", cfg.hidden()},
                        {"stride", cfg.stride},
                        {"d", cfg.d},
                        {"use_multi_level", cfg.use_multi_level},
                        {"use_depthwise", cfg.use_depthwise},
                        {"use_pooling", cfg.use_pooling},
                        {"seed", cfg.seed}};
}

inline SaepConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

namespace detail {
inline void write_text_atomic(const std::filesystem::path& path,
                              const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), Errc::io, "cannot create " + tmp.string());
    out << text;
    out.flush();
    require(out.good(), Errc::io, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(Errc::io, "cannot move " + tmp.string() + " to " + path.string());
  }
}
}  // namespace detail

/// Checkpoint layout: one NPY per parameter field plus config.json.
inline void save_checkpoint(const std::filesystem::path& dir,
                            const SaepParams& params, const SaepConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec && std::filesystem::is_directory(dir), Errc::io,
          "cannot create checkpoint directory " + dir.string());
  const auto fields = params.fields();
  for (std::size_t i = 0; i < fields.size(); ++i)
    tensor_to_npy(*fields[i],
                  dir / (std::string(SaepParams::field_names[i]) + ".npy"));
  detail::write_text_atomic(dir / "config.json", config_to_json(cfg).dump(2) + "\n");
}

inline std::pair<SaepConfig, SaepParams> load_checkpoint(
    const std::filesystem::path& dir) {
  SaepConfig cfg = load_config(dir / "config.json");
  validate_config(cfg, Errc::config);

  SaepParams params;
  const auto shapes = saep_param_shapes(cfg);
  auto fields = params.fields();
  auto grads = params.grads();
  for (std::size_t i = 0; i < fields.size(); ++i) {
    Tensor t = tensor_from_npy(dir / (std::string(SaepParams::field_names[i]) + ".npy"));
    require(t.shape() == shapes[i], Errc::shape,
            std::string(SaepParams::field_names[i]) +
                ".npy does not match the checkpoint config");
    *fields[i] = std::move(t);
    *grads[i] = Tensor::zeros(shapes[i]);
  }
  return {cfg, std::move(params)};
}

}  // namespace saep
