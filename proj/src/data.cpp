#include "d2ssl/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "d2ssl/errors.hpp"

namespace d2ssl {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

std::vector<Sample> renumbered(std::vector<Sample> samples) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
        samples[i].id = i;
    }
    return samples;
}

std::string format_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) {
        throw std::runtime_error("format_double failed");
    }
    return std::string(buf, end);
}

std::vector<std::string> split_commas(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        out.push_back(field);
    }
    if (!line.empty() && line.back() == ',') {
        out.emplace_back();
    }
    return out;
}

template <typename T>
T parse_number(const std::string& s, const std::string& what) {
    T v{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw FormatError("dataset csv: bad " + what + " '" + s + "'");
    }
    return v;
}

} // namespace

std::string_view to_string(Role r) {
    switch (r) {
    case Role::Labeled:
        return "labeled";
    case Role::Unlabeled:
        return "unlabeled";
    case Role::Test:
        return "test";
    }
    return "?";
}

Role parse_role(std::string_view s) {
    if (s == "labeled") {
        return Role::Labeled;
    }
    if (s == "unlabeled") {
        return Role::Unlabeled;
    }
    if (s == "test") {
        return Role::Test;
    }
    throw FormatError("unknown role '" + std::string(s) + "'");
}

SplitDataset::SplitDataset(std::size_t num_classes, std::vector<Sample> samples, std::string provenance)
    : num_classes_(num_classes), samples_(std::move(samples)), provenance_(std::move(provenance)) {
    if (num_classes_ == 0) {
        throw ConfigError("dataset: class count must be positive");
    }
    const std::size_t d = dim();
    for (std::size_t i = 0; i < samples_.size(); ++i) {
        const auto& s = samples_[i];
        if (s.id != i) {
            throw ConfigError("dataset: ids must be contiguous from 0");
        }
        if (s.features.size() != d) {
            throw DimensionError("dataset: sample " + std::to_string(i) + " has inconsistent dimension");
        }
        const bool ood = s.true_class == kOodClass;
        if (!ood && (s.true_class < 0 || static_cast<std::size_t>(s.true_class) >= num_classes_)) {
            throw ConfigError("dataset: sample " + std::to_string(i) + " class out of range");
        }
        if (ood && s.role != Role::Unlabeled) {
            throw ConfigError("dataset: out-of-distribution samples must be unlabeled");
        }
    }
}

std::vector<std::uint64_t> SplitDataset::ids_with_role(Role role) const {
    std::vector<std::uint64_t> ids;
    for (const auto& s : samples_) {
        if (s.role == role) {
            ids.push_back(s.id);
        }
    }
    return ids;
}

std::size_t SplitDataset::count(Role role) const {
    return static_cast<std::size_t>(
        std::count_if(samples_.begin(), samples_.end(), [role](const Sample& s) { return s.role == role; }));
}

TrainingView SplitDataset::training_view() const { return TrainingView(*this); }

TrainingView::TrainingView(const SplitDataset& data)
    : data_(&data), labeled_(data.ids_with_role(Role::Labeled)), unlabeled_(data.ids_with_role(Role::Unlabeled)) {}

int TrainingView::label(std::uint64_t id) const {
    const auto& s = data_->sample(id);
    if (s.role != Role::Labeled) {
        throw std::logic_error("training code requested the hidden class of sample " + std::to_string(id));
    }
    return s.true_class;
}

std::vector<Vector> default_centers(std::size_t num_classes, std::size_t dim, double radius) {
    if (dim < 2) {
        throw ConfigError("default_centers: need at least two dimensions");
    }
    std::vector<Vector> centers;
    if (num_classes == 4 && dim == 2) {
        for (const auto& [x, y] : {std::pair{1.0, 1.0}, {-1.0, 1.0}, {-1.0, -1.0}, {1.0, -1.0}}) {
            centers.push_back({x * radius, y * radius});
        }
        return centers;
    }
    const double r = radius * std::numbers::sqrt2;
    for (std::size_t c = 0; c < num_classes; ++c) {
        Vector center(dim, 0.0);
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(num_classes);
        center[0] = r * std::cos(angle);
        center[1] = r * std::sin(angle);
        centers.push_back(std::move(center));
    }
    return centers;
}

SplitDataset gen_gaussians(const GaussianSpec& spec, Rng& rng) {
    if (spec.num_classes == 0 || spec.dim == 0) {
        throw ConfigError("gen_gaussians: need at least one class and one dimension");
    }
    if (spec.per_class.size() != spec.num_classes || spec.centers.size() != spec.num_classes) {
        throw ConfigError("gen_gaussians: need one count and one center per class");
    }
    if (spec.spread < 0.0) {
        throw ConfigError("gen_gaussians: spread must be non-negative");
    }
    std::set<Vector> distinct;
    for (const auto& c : spec.centers) {
        if (c.size() != spec.dim) {
            throw ConfigError("gen_gaussians: center dimension mismatch");
        }
        if (!distinct.insert(c).second) {
            throw ConfigError("gen_gaussians: duplicate centers");
        }
    }
    std::vector<Sample> samples;
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
        if (spec.per_class[c] == 0) {
            throw ConfigError("gen_gaussians: class counts must be positive");
        }
        for (std::size_t i = 0; i < spec.per_class[c]; ++i) {
            Vector x(spec.dim);
            for (std::size_t d = 0; d < spec.dim; ++d) {
                x[d] = spec.centers[c][d] + spec.spread * rng.normal();
            }
            samples.push_back(Sample{samples.size(), std::move(x), static_cast<int>(c), Role::Unlabeled});
        }
    }
    return SplitDataset(spec.num_classes, std::move(samples), "gaussians");
}

SplitDataset gen_two_moons(std::size_t per_moon, double noise, Rng& rng) {
    if (per_moon == 0 || noise < 0.0) {
        throw ConfigError("gen_two_moons: need per_moon > 0 and noise >= 0");
    }
    std::vector<Sample> samples;
    for (int moon = 0; moon < 2; ++moon) {
        for (std::size_t i = 0; i < per_moon; ++i) {
            const double t = rng.uniform(0.0, std::numbers::pi);
            Vector x = moon == 0 ? Vector{std::cos(t), std::sin(t)} : Vector{1.0 - std::cos(t), 0.5 - std::sin(t)};
            if (noise > 0.0) {
                x[0] += noise * rng.normal();
                x[1] += noise * rng.normal();
            }
            samples.push_back(Sample{samples.size(), std::move(x), moon, Role::Unlabeled});
        }
    }
    return SplitDataset(2, std::move(samples), "two_moons");
}

SplitDataset decode_idx(std::span<const char> images, std::span<const char> labels, std::string provenance) {
    detail::ByteReader img(images, "idx images");
    detail::ByteReader lab(labels, "idx labels");
    const std::uint32_t img_magic = img.u32_be();
    if (img_magic != kIdxImagesMagic) {
        throw FormatError("idx images: bad magic " + std::to_string(img_magic));
    }
    const std::uint32_t lab_magic = lab.u32_be();
    if (lab_magic != kIdxLabelsMagic) {
        throw FormatError("idx labels: bad magic " + std::to_string(lab_magic));
    }
    const std::uint32_t count = img.u32_be();
    const std::uint32_t rows = img.u32_be();
    const std::uint32_t cols = img.u32_be();
    const std::uint32_t label_count = lab.u32_be();
    if (count != label_count) {
        throw FormatError("idx: image count " + std::to_string(count) + " != label count " +
                          std::to_string(label_count));
    }
    const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
    if (pixels == 0) {
        throw FormatError("idx images: zero-sized images");
    }
    const auto raw = img.bytes(pixels * count);
    const auto raw_labels = lab.bytes(count);
    if (img.remaining() != 0 || lab.remaining() != 0) {
        throw FormatError("idx: trailing bytes after payload");
    }
    std::vector<Sample> samples;
    samples.reserve(count);
    int max_label = 0;
    for (std::size_t i = 0; i < count; ++i) {
        Vector x(pixels);
        for (std::size_t p = 0; p < pixels; ++p) {
            x[p] = static_cast<double>(static_cast<std::uint8_t>(raw[i * pixels + p])) / 255.0;
        }
        const int label = static_cast<std::uint8_t>(raw_labels[i]);
        max_label = std::max(max_label, label);
        samples.push_back(Sample{i, std::move(x), label, Role::Unlabeled});
    }
    return SplitDataset(static_cast<std::size_t>(max_label) + 1, std::move(samples), std::move(provenance));
}

SplitDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
    const auto img = detail::read_file(images);
    const auto lab = detail::read_file(labels);
    return decode_idx(img, lab, images.filename().string());
}

std::vector<char> encode_idx_images(std::span<const std::uint8_t> pixels, std::uint32_t count,
                                    std::uint32_t rows, std::uint32_t cols) {
    if (pixels.size() != static_cast<std::size_t>(count) * rows * cols) {
        throw DimensionError("encode_idx_images: pixel count mismatch");
    }
    detail::ByteWriter w;
    w.u32_be(kIdxImagesMagic);
    w.u32_be(count);
    w.u32_be(rows);
    w.u32_be(cols);
    for (std::uint8_t p : pixels) {
        w.u8(p);
    }
    return std::move(w.buffer());
}

std::vector<char> encode_idx_labels(std::span<const std::uint8_t> labels) {
    detail::ByteWriter w;
    w.u32_be(kIdxLabelsMagic);
    w.u32_be(static_cast<std::uint32_t>(labels.size()));
    for (std::uint8_t l : labels) {
        w.u8(l);
    }
    return std::move(w.buffer());
}

namespace {

// Per-class member lists of the non-test, in-distribution pool.
std::vector<std::vector<std::size_t>> class_members(const SplitDataset& pool) {
    std::vector<std::vector<std::size_t>> members(pool.num_classes());
    for (const auto& s : pool.samples()) {
        if (s.role != Role::Test && s.true_class != kOodClass) {
            members[static_cast<std::size_t>(s.true_class)].push_back(s.id);
        }
    }
    return members;
}

} // namespace

SplitDataset split(const SplitDataset& pool, std::size_t labeled_per_class, double test_fraction, Rng& rng) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
        throw ConfigError("split: test fraction must lie in [0, 1)");
    }
    std::vector<Sample> samples(pool.samples().begin(), pool.samples().end());
    for (auto& s : samples) {
        if (s.role == Role::Labeled) {
            s.role = Role::Unlabeled;
        }
    }
    auto members = class_members(pool);
    for (std::size_t c = 0; c < members.size(); ++c) {
        auto& ids = members[c];
        rng.shuffle(ids);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
        if (ids.size() - n_test < labeled_per_class) {
            throw ConfigError("split: class " + std::to_string(c) + " has " + std::to_string(ids.size() - n_test) +
                              " training samples, fewer than " + std::to_string(labeled_per_class));
        }
        for (std::size_t i = 0; i < n_test; ++i) {
            samples[ids[i]].role = Role::Test;
        }
        for (std::size_t i = n_test; i < n_test + labeled_per_class; ++i) {
            samples[ids[i]].role = Role::Labeled;
        }
    }
    return SplitDataset(pool.num_classes(), std::move(samples), pool.provenance());
}

SplitDataset split(const SplitDataset& pool, std::size_t labeled_per_class, const SplitDataset& test_set,
                   Rng& rng) {
    if (test_set.num_classes() != pool.num_classes() || (test_set.size() > 0 && test_set.dim() != pool.dim())) {
        throw ConfigError("split: test set classes or dimension differ from the pool");
    }
    SplitDataset train = split(pool, labeled_per_class, 0.0, rng);
    std::vector<Sample> samples(train.samples().begin(), train.samples().end());
    for (const auto& s : test_set.samples()) {
        if (s.true_class == kOodClass) {
            throw ConfigError("split: test set contains out-of-distribution samples");
        }
        Sample t = s;
        t.role = Role::Test;
        samples.push_back(std::move(t));
    }
    return SplitDataset(pool.num_classes(), renumbered(std::move(samples)), pool.provenance());
}

SplitDataset unbalance(const SplitDataset& data, std::span<const std::size_t> keep, Rng& rng) {
    if (keep.size() != data.num_classes()) {
        throw ConfigError("unbalance: need one keep count per class");
    }
    std::vector<std::vector<std::size_t>> unlabeled(data.num_classes());
    for (const auto& s : data.samples()) {
        if (s.role == Role::Unlabeled && s.true_class != kOodClass) {
            unlabeled[static_cast<std::size_t>(s.true_class)].push_back(s.id);
        }
    }
    std::vector<bool> drop(data.size(), false);
    for (std::size_t c = 0; c < keep.size(); ++c) {
        auto& ids = unlabeled[c];
        if (keep[c] > ids.size()) {
            throw ConfigError("unbalance: class " + std::to_string(c) + " keeps " + std::to_string(keep[c]) +
                              " of only " + std::to_string(ids.size()) + " unlabeled samples");
        }
        rng.shuffle(ids);
        for (std::size_t i = keep[c]; i < ids.size(); ++i) {
            drop[ids[i]] = true;
        }
    }
    std::vector<Sample> samples;
    for (const auto& s : data.samples()) {
        if (!drop[s.id]) {
            samples.push_back(s);
        }
    }
    return SplitDataset(data.num_classes(), renumbered(std::move(samples)), data.provenance());
}

SplitDataset inject_ood(const SplitDataset& data, const SplitDataset& source, std::size_t count, Rng& rng) {
    if (count == 0) {
        return data;
    }
    if (source.dim() != data.dim()) {
        throw ConfigError("inject_ood: source dimension " + std::to_string(source.dim()) + " != " +
                          std::to_string(data.dim()));
    }
    if (count > source.size()) {
        throw ConfigError("inject_ood: source has only " + std::to_string(source.size()) + " samples");
    }
    std::vector<std::size_t> order(source.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng.shuffle(order);
    std::vector<Sample> samples(data.samples().begin(), data.samples().end());
    for (std::size_t i = 0; i < count; ++i) {
        samples.push_back(Sample{0, source.sample(order[i]).features, kOodClass, Role::Unlabeled});
    }
    return SplitDataset(data.num_classes(), renumbered(std::move(samples)), data.provenance() + "+ood");
}

std::string encode_dataset_csv(const SplitDataset& data) {
    std::string out = "# num_classes=" + std::to_string(data.num_classes()) + " provenance=" + data.provenance() + "\n";
    out += "id,role,class";
    for (std::size_t d = 0; d < data.dim(); ++d) {
        out += ",x" + std::to_string(d);
    }
    out += '\n';
    for (const auto& s : data.samples()) {
        out += std::to_string(s.id);
        out += ',';
        out += to_string(s.role);
        out += ',';
        if (s.true_class != kOodClass) {
            out += std::to_string(s.true_class);
        }
        for (double v : s.features) {
            out += ',';
            out += format_double(v);
        }
        out += '\n';
    }
    return out;
}

void save_dataset_csv(const SplitDataset& data, const std::filesystem::path& path) {
    const std::string text = encode_dataset_csv(data);
    detail::write_file(path, text);
}

SplitDataset decode_dataset_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("# num_classes=", 0) != 0) {
        throw FormatError("dataset csv: missing '# num_classes=' line");
    }
    const std::string meta = line.substr(14);
    const auto space = meta.find(' ');
    const auto num_classes = parse_number<std::size_t>(meta.substr(0, space), "class count");
    std::string provenance;
    if (space != std::string::npos && meta.compare(space + 1, 11, "provenance=") == 0) {
        provenance = meta.substr(space + 12);
    }
    if (!std::getline(in, line) || line.rfind("id,role,class", 0) != 0) {
        throw FormatError("dataset csv: missing header");
    }
    const std::size_t dim = split_commas(line).size() - 3;
    std::vector<Sample> samples;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split_commas(line);
        if (fields.size() != dim + 3) {
            throw FormatError("dataset csv: row with " + std::to_string(fields.size()) + " fields");
        }
        Sample s;
        s.id = parse_number<std::uint64_t>(fields[0], "id");
        s.role = parse_role(fields[1]);
        s.true_class = fields[2].empty() ? kOodClass : parse_number<int>(fields[2], "class");
        s.features.resize(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            s.features[d] = parse_number<double>(fields[3 + d], "feature");
        }
        samples.push_back(std::move(s));
    }
    return SplitDataset(num_classes, std::move(samples), provenance);
}

SplitDataset load_dataset_csv(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return decode_dataset_csv(std::string(bytes.begin(), bytes.end()));
}

} // namespace d2ssl
