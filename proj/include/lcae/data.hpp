#pragma once

#include <string>
#include <vector>

#include "lcae/core.hpp"
#include "lcae/rng.hpp"

namespace lcae::data {

/// One image/label pair. Intensities are kept as reals in 0..255.
struct Sample {
  Image<double> image;
  Mask mask;
  std::string id;
};

/// Recipe for one synthetic infrared scene: a smooth background (planar
/// gradient plus low-frequency noise, optionally a few bright clutter ridges)
/// with small Gaussian-profile targets stamped on top.
struct SynthSpec {
  int height = 256;
  int width = 256;
  int min_targets = 1;
  int max_targets = 3;
  double amp_min = 60.0;
  double amp_max = 180.0;
  double sigma_min = 0.5;
  double sigma_max = 2.0;
  bool clutter = true;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Subset { train, test };

struct ManifestEntry {
  std::string id;
  Subset subset = Subset::train;
};

// -- image file I/O (8-bit PGM, P5 written, P5/P2 read) ---------------------

Image<double> read_pgm(const std::string& path);

/// Writes values clamped to [0,255] and rounded half-up to 8 bits.
void write_pgm(const std::string& path, const Image<double>& image);

Mask read_mask(const std::string& path);       // binarized at > 127
void write_mask(const std::string& path, const Mask& mask);  // {0,1} -> {0,255}

Sample load_sample(const std::string& image_path, const std::string& mask_path);

// -- transforms --------------------------------------------------------------

/// Per-image standardization: (x - mean) / max(std, 1e-6).
Image<double> standardize(const Image<double>& image);

/// Edge-replicate pads each axis up to at least out_h/out_w, then crops.
/// A null rng means deterministic center crop (eval); otherwise the crop
/// offset is uniform random (train).
Sample pad_crop(const Sample& sample, int out_h, int out_w, Rng* rng);

inline Sample pad_crop_256(const Sample& s, Rng* rng) { return pad_crop(s, 256, 256, rng); }

/// Horizontal and vertical flips, each applied with probability 0.5,
/// identically to image and mask.
Sample random_flip(const Sample& sample, Rng& rng);

// -- synthetic scenes ---------------------------------------------------------

Sample synth_generate(const SynthSpec& spec);

// -- dataset layout -----------------------------------------------------------
//
// A dataset directory holds images/<id>.pgm, masks/<id>.pgm and manifest.txt
// with one "<id> <train|test>" line per sample.

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

void write_dataset(const std::string& dir, const std::vector<Sample>& samples,
                   const std::vector<ManifestEntry>& manifest);

/// Loads every manifest entry belonging to the subset.
std::vector<Sample> load_dataset(const std::string& dir, Subset subset);

}  // namespace lcae::data
