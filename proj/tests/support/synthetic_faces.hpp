#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "frboost/image.hpp"
#include "frboost/rng.hpp"

namespace frboost::testsupport {

// Procedural face-like images: an oval head with eyes, nose, mouth and a
// hair band over a plain background. Identity-determining parameters are a
// pure function of an identity seed; per-photo nuisance (lighting, pose
// jitter, background) is sampled from an rng. The family is simple enough
// for CPU-sized networks to learn yet has real identity structure, which is
// what the pipeline tests need.
struct FaceParams {
  // identity-determining
  double skin_r = 0.8, skin_g = 0.6, skin_b = 0.5;
  double face_aspect = 1.3;   // height/width of the head oval
  double face_scale = 0.8;    // head width as a fraction of image width
  double eye_dx = 0.16;       // half eye spacing, fraction of width
  double eye_y = -0.08;       // eye row offset from centre, fraction of height
  double eye_size = 0.05;
  double mouth_w = 0.18;
  double mouth_y = 0.22;
  double nose_len = 0.14;
  double hair_darkness = 0.5;   // 0..1
  double hair_coverage = 0.32;  // fraction of head height covered by hair
  // per-photo nuisance
  double brightness = 0.0;  // additive, [-1,1] scale
  double rot = 0.0;         // radians
  double dx = 0.0, dy = 0.0;  // centre offset, fraction of size
  double background = 0.25;   // gray level 0..1
};

// Identity parameters derived deterministically from a seed.
FaceParams identity_params(uint64_t identity_seed);

// Applies random per-photo nuisance to identity parameters.
FaceParams with_nuisance(const FaceParams& id, Rng& rng);

// Renders at the given square size.
Image8 render_face(const FaceParams& p, int size);

// Convenience: render `count` photos of one identity.
std::vector<Image8> render_identity_photos(uint64_t identity_seed, int count, int size, Rng& rng);

// Synthetic demographic-style group of an identity in 1..num_groups; groups
// correlate with skin tone so a color-based classifier can recover them.
int group_of_identity(uint64_t identity_seed, int num_groups);

// Writes `count` photos of each of `identities` into dir (flat folder of
// PNGs named <identity>_<photo>.png), returns the file paths in order.
std::vector<std::string> write_face_folder(const std::string& dir,
                                           const std::vector<uint64_t>& identities,
                                           int photos_per_identity, int size, Rng& rng);

}  // namespace frboost::testsupport
