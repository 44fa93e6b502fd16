#pragma once

#include <string>
#include <vector>

#include "mnas/episode.hpp"
#include "mnas/rng.hpp"

namespace mnas {

enum class Split { MetaTrain, MetaTest };

// Class-organized single-channel image collection. The first train_classes
// classes form the meta-train split, the rest meta-test; the two class sets
// are disjoint by construction. Pixel values live in [0,1].
struct ClassDataset {
    int height = 0;
    int width = 0;
    int train_classes = 0;
    std::vector<std::vector<std::vector<double>>> classes;  // [class][image][pixel]

    int n_classes() const { return static_cast<int>(classes.size()); }
    int split_begin(Split s) const { return s == Split::MetaTrain ? 0 : train_classes; }
    int split_size(Split s) const {
        return s == Split::MetaTrain ? train_classes : n_classes() - train_classes;
    }
};

// 4/5 of classes meta-train, at least one class per split when possible.
int default_train_classes(int n_classes);

// Procedurally generated stroke glyphs: each class is a random template of
// 3-6 line/arc strokes; samples apply per-sample affine jitter (rotation up
// to 15 degrees, translation up to 10%) plus pixel noise sigma 0.05.
// Deterministic in seed.
ClassDataset generate_synthetic_glyphs(uint64_t seed, int n_classes, int per_class, int size);

// FSDS container (little-endian): magic "FSDS", u32 version=1, u32 n_classes,
// u32 per_class, u32 height, u32 width, then n_classes*per_class images of
// height*width u8 pixels in class-major order. Pixels quantize to bytes on
// save and normalize back to [0,1] on load.
void save_dataset(const ClassDataset& dataset, const std::string& path);
ClassDataset load_dataset(const std::string& path);

// n_way classes without replacement from the split, k_shot + query_per_class
// images without replacement within each class, labels relabeled to a random
// permutation of [0, n_way).
Episode sample_episode(const ClassDataset& dataset, Split split, int n_way, int k_shot,
                       int query_per_class, Rng& rng);

}  // namespace mnas
