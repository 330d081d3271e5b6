#pragma once

#include <filesystem>
#include <string>

#include "cekg/config.hpp"
#include "cekg/kg.hpp"

namespace fixtures {

inline std::filesystem::path data(const std::string& name) { return std::filesystem::path(CEKG_DATA_DIR) / name; }

inline const cekg::Config& config() {
  static const cekg::Config c = cekg::Config::load(data("config.json"));
  return c;
}

inline cekg::kg::Entity entity(std::string id, cekg::kg::EntityKind kind, std::set<std::string> tags,
                               std::optional<cekg::kg::Vad> vad = std::nullopt) {
  cekg::kg::Entity e;
  e.id = id;
  e.label = id;
  e.kind = kind;
  e.culture_tags = std::move(tags);
  e.vad = vad;
  e.provenance = "test";
  return e;
}

// Fresh directory under the system temp dir, removed first if present.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cekg-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
