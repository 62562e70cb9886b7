#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "d2ssl/numerics.hpp"

namespace d2ssl {

enum class Role : std::uint8_t { Labeled, Unlabeled, Test };

std::string_view to_string(Role r);
Role parse_role(std::string_view s);

/// Hidden class of injected out-of-distribution samples.
inline constexpr int kOodClass = -1;

struct Sample {
    std::uint64_t id = 0;
    Vector features;
    int true_class = 0;
    Role role = Role::Unlabeled;

    friend bool operator==(const Sample&, const Sample&) = default;
};

class TrainingView;

/// Immutable collection of samples with ids 0..size-1. Generators and
/// loaders return an unsplit pool (every sample Unlabeled); `split`
/// assigns the final roles.
class SplitDataset {
public:
    SplitDataset() = default;
    SplitDataset(std::size_t num_classes, std::vector<Sample> samples, std::string provenance = {});

    std::size_t size() const { return samples_.size(); }
    std::size_t num_classes() const { return num_classes_; }
    std::size_t dim() const { return samples_.empty() ? 0 : samples_.front().features.size(); }
    const std::string& provenance() const { return provenance_; }

    /// Full access including hidden classes; for evaluation code only.
    const Sample& sample(std::uint64_t id) const { return samples_.at(id); }
    std::span<const Sample> samples() const { return samples_; }

    std::vector<std::uint64_t> ids_with_role(Role role) const;
    std::size_t count(Role role) const;

    TrainingView training_view() const;

    friend bool operator==(const SplitDataset&, const SplitDataset&) = default;

private:
    std::size_t num_classes_ = 0;
    std::vector<Sample> samples_;
    std::string provenance_;
};

/// What training code may see: features and roles of every sample, but the
/// class only of labeled samples.
class TrainingView {
public:
    explicit TrainingView(const SplitDataset& data);

    std::size_t size() const { return data_->size(); }
    std::size_t num_classes() const { return data_->num_classes(); }
    std::span<const double> features(std::uint64_t id) const { return data_->sample(id).features; }
    Role role(std::uint64_t id) const { return data_->sample(id).role; }
    /// Throws std::logic_error for any non-labeled sample.
    int label(std::uint64_t id) const;

    const std::vector<std::uint64_t>& labeled_ids() const { return labeled_; }
    const std::vector<std::uint64_t>& unlabeled_ids() const { return unlabeled_; }

private:
    const SplitDataset* data_;
    std::vector<std::uint64_t> labeled_;
    std::vector<std::uint64_t> unlabeled_;
};

struct GaussianSpec {
    std::size_t num_classes = 4;
    std::size_t dim = 2;
    std::vector<std::size_t> per_class;  ///< one count per class
    std::vector<Vector> centers;         ///< one center per class
    double spread = 1.0;                 ///< isotropic standard deviation
};

/// Centers at (+-r, +-r) for 4 classes in 2-D; otherwise spaced on a circle
/// of radius r*sqrt(2) in the first two coordinates.
std::vector<Vector> default_centers(std::size_t num_classes, std::size_t dim, double radius);

SplitDataset gen_gaussians(const GaussianSpec& spec, Rng& rng);

/// Interleaved half-circles: class 0 on (cos t, sin t), class 1 on
/// (1 - cos t, 0.5 - sin t), t ~ U[0, pi], plus N(0, noise^2) jitter.
SplitDataset gen_two_moons(std::size_t per_moon, double noise, Rng& rng);

/// IDX images (magic 0x00000803, dims n x rows x cols) and labels
/// (magic 0x00000801, dim n). Pixels scaled to [0, 1].
SplitDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
SplitDataset decode_idx(std::span<const char> images, std::span<const char> labels,
                        std::string provenance = "idx");
std::vector<char> encode_idx_images(std::span<const std::uint8_t> pixels, std::uint32_t count,
                                    std::uint32_t rows, std::uint32_t cols);
std::vector<char> encode_idx_labels(std::span<const std::uint8_t> labels);

/// Draws exactly `labeled_per_class` labeled samples per class from the
/// non-test pool, holds out `test_fraction` of every class as test, and
/// leaves the rest unlabeled.
SplitDataset split(const SplitDataset& pool, std::size_t labeled_per_class, double test_fraction, Rng& rng);
/// As above with an explicit test set appended after the training pool.
SplitDataset split(const SplitDataset& pool, std::size_t labeled_per_class, const SplitDataset& test_set,
                   Rng& rng);

/// Subsamples the unlabeled pool to `keep[c]` samples of class c.
SplitDataset unbalance(const SplitDataset& data, std::span<const std::size_t> keep, Rng& rng);

/// Appends `count` samples drawn from `source` to the unlabeled pool with
/// hidden class kOodClass.
SplitDataset inject_ood(const SplitDataset& data, const SplitDataset& source, std::size_t count, Rng& rng);

/// CSV snapshot: "# num_classes=N", header "id,role,class,x0,...", one row
/// per sample; class is empty for OOD samples. Floats print round-trip exact.
void save_dataset_csv(const SplitDataset& data, const std::filesystem::path& path);
std::string encode_dataset_csv(const SplitDataset& data);
SplitDataset load_dataset_csv(const std::filesystem::path& path);
SplitDataset decode_dataset_csv(const std::string& text);

} // namespace d2ssl
