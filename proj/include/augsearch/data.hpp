#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "augsearch/tensor.hpp"

namespace augsearch::data {

enum class Split : std::uint8_t { Unassigned, Train, Val };

/// Images in [0, 1] stored as one [N, C, H, W] tensor.
struct LabeledDataset {
    Tensor images;
    std::vector<int> labels;
    std::size_t class_count = 0;
    /// Per-sample split tags; empty when the dataset carries no split.
    std::vector<Split> split;

    std::size_t size() const { return labels.size(); }
    Shape image_shape() const;
    /// Throws ConfigError when images, labels and tags disagree or a label
    /// is out of range.
    void validate() const;
};

enum class Format { CifarBinary, Container };

Format parse_format(const std::string& name);

/// Reads a dataset from disk. Pixels are scaled by 1/255. Throws ParseError
/// on truncated files, a bad magic number or out-of-range labels.
LabeledDataset load_raw_dataset(const std::filesystem::path& path, Format format);

/// Writes the simple container format: "FAUG", u32 count, u32 C, H, W,
/// u32 class_count, then per record a u16 label and C*H*W bytes, little-endian.
void save_container(const LabeledDataset& ds, const std::filesystem::path& path);

/// Samples with the given indices, in order.
LabeledDataset take(const LabeledDataset& ds, std::span<const std::size_t> indices);

/// Class-stratified random subset of `n` samples (all of them when n >= size).
LabeledDataset subset(const LabeledDataset& ds, std::size_t n, std::uint64_t seed);

/// Class-balanced random halves. A class with an odd count gives its extra
/// sample to the training half; classes with a single sample are reported
/// through `warnings`.
std::pair<LabeledDataset, LabeledDataset> split_half(const LabeledDataset& ds, std::uint64_t seed,
                                                     std::vector<std::string>* warnings = nullptr);

/// Uses the dataset's own split tags when present, split_half otherwise.
/// Throws ConfigError when either side would be empty.
std::pair<LabeledDataset, LabeledDataset> train_val(const LabeledDataset& ds, std::uint64_t seed,
                                                    std::vector<std::string>* warnings = nullptr);

/// Two-class 3x32x32 images of two bars crossing at the center: at 90 degrees
/// for class 0, at 60 degrees for class 1. Class identity does not depend on
/// orientation. The first half of the samples (tagged Train) is drawn within
/// 3 degrees of upright, the second half (tagged Val) at angles uniform in
/// [-30, 30] degrees. Labels alternate, so both
/// halves are exactly balanced. Requires n >= 200 and even.
LabeledDataset synth_rotation_task(std::size_t n, std::uint64_t seed);

struct Batch {
    Tensor images;  // [B, C, H, W]
    std::vector<int> labels;
};

Batch gather(const LabeledDataset& ds, std::span<const std::size_t> indices);

/// The dataset's images one by one, as [C, H, W].
Tensor image(const LabeledDataset& ds, std::size_t i);

}  // namespace augsearch::data
