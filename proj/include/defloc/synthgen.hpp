#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "defloc/geometry.hpp"
#include "defloc/imaging.hpp"

namespace defloc {

enum class DefectClass : int { kSB = 0, kTB, kLC, kLB, kMBH, kMBNH };

inline constexpr int kNumClasses = 6;
inline constexpr std::array<DefectClass, kNumClasses> kAllClasses = {
    DefectClass::kSB, DefectClass::kTB,  DefectClass::kLC,
    DefectClass::kLB, DefectClass::kMBH, DefectClass::kMBNH};

std::string_view class_code(DefectClass c);
DefectClass class_from_code(std::string_view code);

// Vertical line-space pattern. Line k covers columns [k*pitch, k*pitch + width).
struct PatternSpec {
  int width = 512;
  int height = 512;
  int line_pitch = 24;
  int line_width = 12;
  double line_intensity = 0.75;
  double space_intensity = 0.25;
  double edge_sigma = 1.0;
  double noise_sigma = 0.05;
  double line_edge_roughness = 0.5;

  void validate() const;
  friend bool operator==(const PatternSpec&, const PatternSpec&) = default;
};

struct Annotation {
  Box box;
  DefectClass cls = DefectClass::kSB;
};

// Relative class weights indexed by DefectClass.
using ClassMix = std::array<double, kNumClasses>;

ClassMix uniform_single_mix();  // every class but LB, equal weight
ClassMix table_mix();           // fab-like imbalance, TB dominant

enum class Split { kTrain, kTest };
std::string_view split_name(Split s);

struct ManifestRecord {
  std::string file;  // relative to the manifest's directory
  std::vector<Annotation> annotations;
};

struct GenerateConfig {
  std::string profile = "easy";
  int n_images = 1000;
  ClassMix class_mix = uniform_single_mix();
  double double_defect_fraction = 0.0;
  PatternSpec pattern;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  int border_margin = 16;  // px kept free between defects and the border

  void validate() const;
  friend bool operator==(const GenerateConfig&, const GenerateConfig&) = default;
};

struct DatasetManifest {
  Split split = Split::kTrain;
  GenerateConfig config;
  std::vector<ManifestRecord> records;
  std::filesystem::path root;  // directory holding the manifest; not serialized

  std::filesystem::path image_path(std::size_t i) const { return root / records[i].file; }
  GrayImage load_image(std::size_t i) const { return read_png(image_path(i)); }
};

// Named generator presets: "easy" (uniform single defects, low noise, kept
// 64 px off the border) and "hard" (fab-like mix with LC-paired double
// defects, high noise, anywhere but the outer 16 px).
GenerateConfig profile_config(std::string_view name);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

GrayImage render_pattern(const PatternSpec& spec, std::uint64_t seed);

struct InjectOptions {
  std::optional<Box> anchor;  // LB: place within two pitches of this box
  std::vector<Box> avoid;     // keep the new annotation disjoint from these
  int border_margin = 16;     // px kept free between the defect and the border
};

struct Injection {
  GrayImage image;
  Annotation annotation;
};

// Paints one defect and returns its annotation (tight bounds of changed
// pixels dilated by 2 px). Throws ContractError when the image cannot hold
// the class geometry.
Injection inject_defect(const GrayImage& img, DefectClass cls,
                        const PatternSpec& spec, std::uint64_t seed,
                        const InjectOptions& opts = {});

struct SyntheticImage {
  GrayImage image;
  std::vector<Annotation> annotations;
};

SyntheticImage synthesize_image(const GenerateConfig& cfg, std::uint64_t index);

// Writes images/{split}/{index:06}.png plus manifest_train.json and
// manifest_test.json under out_dir.
std::pair<DatasetManifest, DatasetManifest> generate_dataset(
    const std::filesystem::path& out_dir, const GenerateConfig& cfg);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

void to_json(nlohmann::json& j, const PatternSpec& p);
void from_json(const nlohmann::json& j, PatternSpec& p);
void to_json(nlohmann::json& j, const GenerateConfig& c);
void from_json(const nlohmann::json& j, GenerateConfig& c);
nlohmann::json box_to_json(const Box& b);
Box box_from_json(const nlohmann::json& j);
nlohmann::json class_mix_to_json(const ClassMix& mix);
ClassMix class_mix_from_json(const nlohmann::json& j);

}  // namespace defloc
