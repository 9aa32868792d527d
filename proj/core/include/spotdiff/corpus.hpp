#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "spotdiff/config.hpp"
#include "spotdiff/image.hpp"

namespace spotdiff {

inline constexpr int kManifestVersion = 1;

/// Shape family names double as the subject tokens of the prompt lexicon.
inline constexpr std::array<const char*, 6> kShapeFamilies = {"circle", "square", "triangle",
                                                              "diamond", "cross", "ring"};
inline constexpr int kFillColors = 8;
inline constexpr std::array<const char*, 4> kTextures = {"solid", "stripes", "dots", "checker"};
inline constexpr std::array<const char*, 5> kBackgroundPatterns = {"solid", "gradient", "checker", "noise",
                                                                   "stripes"};
inline constexpr int kBackgroundPalettes = 6;

struct Identity {
  int shape = 0;
  int color = 0;
  int texture = 0;
  bool operator==(const Identity&) const = default;
};

struct Pose {
  double rotation = 0.0;  // radians
  double offset_x = 0.0;  // pixels from the canvas centre
  double offset_y = 0.0;
  double scale = 0.3;     // subject radius as a fraction of the canvas
  bool operator==(const Pose&) const = default;
};

struct Background {
  int pattern = 0;
  int palette = 0;
  bool operator==(const Background&) const = default;
};

struct FactorSpec {
  Identity identity;
  Pose pose;
  Background background;
  bool operator==(const FactorSpec&) const = default;
};

/// Throws InputError for indices outside the fixed vocabularies or a pose
/// outside the drawable range.
void validate_factors(const FactorSpec& factors);

/// Deterministic 4x-supersampled render, quantized to 8-bit levels.
/// Without the subject the result depends on the background alone.
ImageTensor render(const FactorSpec& factors, bool with_subject, int size = 32);
/// Subject rendered over the neutral grey canvas used for pose variants.
ImageTensor render_on_neutral(const Identity& identity, const Pose& pose, int size = 32);
/// Pixels the subject touches (any coverage), row-major H x W.
std::vector<bool> subject_mask(const Pose& pose, const Identity& identity, int size = 32);

struct VariantRecord {
  int identity = 0;
  int pose = 0;
  std::string image;
};

struct SampleRecord {
  int index = 0;
  int original = 0;
  int identity = 0;
  int pose = 0;
  int background = 0;
  std::string main_image;
  std::string background_image;
  std::vector<VariantRecord> variants;
};

struct OriginalRecord {
  int identity = 0;
  int pose = 0;
  std::vector<int> subjects;
  int samples = 0;
};

/// On-disk corpus index. Vocabularies are indexed by the ids used in records.
struct Manifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  int image_size = 32;
  int pose_variants = 3;
  std::vector<Identity> identities;
  std::vector<Pose> poses;
  std::vector<Background> backgrounds;
  std::vector<int> train_identities;
  std::vector<int> heldout_identities;
  std::vector<OriginalRecord> originals;
  std::vector<SampleRecord> samples;
  std::filesystem::path root;

  std::string token(int identity) const;
  FactorSpec factors(const SampleRecord& record) const;
  FactorSpec factors(int identity, int pose, int background) const;
};

/// Renders the corpus into `out_dir` and writes `manifest.json` last, via a
/// rename, so a partial run never leaves a readable manifest.
Manifest generate_corpus(const Config& config, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Reads `dir/manifest.json`. Missing file -> PersistenceError; malformed or
/// inconsistent content -> CorruptCorpusError; wrong schema -> VersioningError.
Manifest load_manifest(const std::filesystem::path& dir);
void save_manifest(const Manifest& manifest, const std::filesystem::path& dir);

struct CorpusSample {
  ImageTensor main_image;
  ImageTensor background_image;
  std::vector<ImageTensor> pose_variants;
  FactorSpec factors;
  std::vector<Identity> variant_identities;
  std::string prompt_subject_token;
  int index = 0;
  int identity_id = 0;
  int pose_id = 0;
  int background_id = 0;
};

/// Decodes one sample and re-checks its invariants.
CorpusSample load_sample(const Manifest& manifest, int index);

}  // namespace spotdiff
