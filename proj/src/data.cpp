#include "augsearch/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>

#include "augsearch/errors.hpp"
#include "augsearch/rng.hpp"

namespace augsearch::data {

namespace {

constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;
constexpr std::size_t kCifarClasses = 10;
constexpr std::array<char, 4> kMagic = {'F', 'A', 'U', 'G'};

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_u32(const std::vector<unsigned char>& b, std::size_t at) {
    return static_cast<std::uint32_t>(b[at]) | static_cast<std::uint32_t>(b[at + 1]) << 8 |
           static_cast<std::uint32_t>(b[at + 2]) << 16 | static_cast<std::uint32_t>(b[at + 3]) << 24;
}

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

LabeledDataset load_cifar(const std::vector<unsigned char>& bytes, const std::string& name) {
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
        throw ParseError(name + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                         std::to_string(kCifarRecord) + "-byte records (truncated file?)");
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    const std::size_t per = kCifarRecord - 1;
    LabeledDataset ds;
    ds.class_count = kCifarClasses;
    ds.images = Tensor(Shape{n, 3, 32, 32});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * kCifarRecord;
        if (rec[0] >= kCifarClasses) {
            throw ParseError(name + ": record " + std::to_string(i) + " has label " + std::to_string(rec[0]) +
                             " outside [0, 10)");
        }
        ds.labels[i] = rec[0];
        for (std::size_t p = 0; p < per; ++p) ds.images[i * per + p] = rec[1 + p] / 255.0;
    }
    return ds;
}

LabeledDataset load_container(const std::vector<unsigned char>& bytes, const std::string& name) {
    constexpr std::size_t kHeader = 4 + 5 * 4;
    if (bytes.size() < kHeader) throw ParseError(name + ": truncated header");
    if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw ParseError(name + ": bad magic (expected FAUG)");
    const std::size_t n = read_u32(bytes, 4), c = read_u32(bytes, 8), h = read_u32(bytes, 12), w = read_u32(bytes, 16);
    const std::size_t classes = read_u32(bytes, 20);
    const std::size_t per = c * h * w;
    if (per == 0 || classes == 0) throw ParseError(name + ": empty image shape or zero classes");
    if (bytes.size() != kHeader + n * (2 + per)) {
        throw ParseError(name + ": expected " + std::to_string(kHeader + n * (2 + per)) + " bytes for " +
                         std::to_string(n) + " records, found " + std::to_string(bytes.size()));
    }
    LabeledDataset ds;
    ds.class_count = classes;
    ds.images = Tensor(Shape{n, c, h, w});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + kHeader + i * (2 + per);
        const std::size_t label = rec[0] | (static_cast<std::size_t>(rec[1]) << 8);
        if (label >= classes) {
            throw ParseError(name + ": record " + std::to_string(i) + " has label " + std::to_string(label) +
                             " outside [0, " + std::to_string(classes) + ")");
        }
        ds.labels[i] = static_cast<int>(label);
        for (std::size_t p = 0; p < per; ++p) ds.images[i * per + p] = rec[2 + p] / 255.0;
    }
    return ds;
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    const double s = std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0);
    return std::hypot(px - ax - s * dx, py - ay - s * dy);
}

}  // namespace

Shape LabeledDataset::image_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }

void LabeledDataset::validate() const {
    if (images.rank() != 4) throw ConfigError("dataset images must be [N,C,H,W], got " + to_string(images.shape()));
    if (images.dim(0) != labels.size()) {
        throw ConfigError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
    }
    if (!split.empty() && split.size() != labels.size()) throw ConfigError("dataset split tags do not match its size");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
            throw ConfigError("label " + std::to_string(l) + " outside [0, " + std::to_string(class_count) + ")");
        }
}

Format parse_format(const std::string& name) {
    if (name == "cifar-binary" || name == "cifar") return Format::CifarBinary;
    if (name == "container" || name == "simple-container") return Format::Container;
    throw ConfigError("unknown dataset format '" + name + "' (expected cifar-binary or container)");
}

LabeledDataset load_raw_dataset(const std::filesystem::path& path, Format format) {
    const auto bytes = read_file(path);
    return format == Format::CifarBinary ? load_cifar(bytes, path.string()) : load_container(bytes, path.string());
}

void save_container(const LabeledDataset& ds, const std::filesystem::path& path) {
    ds.validate();
    const Shape s = ds.image_shape();
    const std::size_t per = numel(s);
    std::vector<unsigned char> out(kMagic.begin(), kMagic.end());
    put_u32(out, static_cast<std::uint32_t>(ds.size()));
    for (std::size_t d : s) put_u32(out, static_cast<std::uint32_t>(d));
    put_u32(out, static_cast<std::uint32_t>(ds.class_count));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.push_back(static_cast<unsigned char>(ds.labels[i] & 0xFF));
        out.push_back(static_cast<unsigned char>((ds.labels[i] >> 8) & 0xFF));
        for (std::size_t p = 0; p < per; ++p) {
            out.push_back(static_cast<unsigned char>(std::lround(std::clamp(ds.images[i * per + p], 0.0, 1.0) * 255.0)));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("failed writing " + path.string());
}

LabeledDataset take(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    const Shape s = ds.image_shape();
    const std::size_t per = numel(s);
    Shape shape{indices.size()};
    shape.insert(shape.end(), s.begin(), s.end());
    LabeledDataset out;
    out.class_count = ds.class_count;
    out.images = Tensor(shape);
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::size_t i = indices[j];
        if (i >= ds.size()) throw UsageError("take: index " + std::to_string(i) + " out of range");
        std::copy_n(ds.images.data() + i * per, per, out.images.data() + j * per);
        out.labels.push_back(ds.labels[i]);
        if (!ds.split.empty()) out.split.push_back(ds.split[i]);
    }
    return out;
}

LabeledDataset subset(const LabeledDataset& ds, std::size_t n, std::uint64_t seed) {
    if (n >= ds.size()) return ds;
    // Stratify by (split tag, class) so tagged halves and class balance survive.
    std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int tag = ds.split.empty() ? 0 : static_cast<int>(ds.split[i]);
        groups[{tag, ds.labels[i]}].push_back(i);
    }
    Rng rng(seed, "subset");
    std::vector<std::size_t> chosen;
    std::size_t assigned = 0, remaining = ds.size();
    for (auto& [key, idx] : groups) {
        rng.shuffle(idx);
        // Proportional allocation with largest-remainder rounding done greedily.
        const std::size_t want = (idx.size() * (n - assigned) + remaining / 2) / remaining;
        const std::size_t k = std::min(want, idx.size());
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
        assigned += k;
        remaining -= idx.size();
    }
    std::sort(chosen.begin(), chosen.end());
    return take(ds, chosen);
}

std::pair<LabeledDataset, LabeledDataset> split_half(const LabeledDataset& ds, std::uint64_t seed,
                                                     std::vector<std::string>* warnings) {
    if (ds.size() < 2) throw ConfigError("dataset too small to split: " + std::to_string(ds.size()) + " samples");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
    Rng rng(seed, "split");
    std::vector<std::size_t> train, val;
    for (auto& [label, idx] : by_class) {
        if (idx.size() == 1 && warnings) {
            warnings->push_back("class " + std::to_string(label) + " has a single sample; it goes to the training half");
        }
        rng.shuffle(idx);
        const std::size_t half = (idx.size() + 1) / 2;
        train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
        val.insert(val.end(), idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    auto a = take(ds, train), b = take(ds, val);
    a.split.assign(a.size(), Split::Train);
    b.split.assign(b.size(), Split::Val);
    return {std::move(a), std::move(b)};
}

std::pair<LabeledDataset, LabeledDataset> train_val(const LabeledDataset& ds, std::uint64_t seed,
                                                    std::vector<std::string>* warnings) {
    std::pair<LabeledDataset, LabeledDataset> out;
    if (ds.split.empty()) {
        out = split_half(ds, seed, warnings);
    } else {
        std::vector<std::size_t> train, val;
        for (std::size_t i = 0; i < ds.size(); ++i) (ds.split[i] == Split::Val ? val : train).push_back(i);
        out = {take(ds, train), take(ds, val)};
    }
    if (out.first.size() == 0 || out.second.size() == 0) {
        throw ConfigError("dataset too small for a train/validation split");
    }
    return out;
}

LabeledDataset synth_rotation_task(std::size_t n, std::uint64_t seed) {
    if (n < 200 || n % 2 != 0) throw ConfigError("synthetic rotation task needs an even n >= 200, got " + std::to_string(n));
    constexpr std::size_t C = 3, H = 32, W = 32;
    LabeledDataset ds;
    ds.class_count = 2;
    ds.images = Tensor(Shape{n, C, H, W});
    ds.labels.resize(n);
    ds.split.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, "synth-rotation", {i});
        const int label = static_cast<int>(i % 2);
        const bool val = i >= n / 2;
        ds.labels[i] = label;
        ds.split[i] = val ? Split::Val : Split::Train;

        const double max_angle = val ? 30.0 : 3.0;
        const double angle = (2.0 * rng.uniform() - 1.0) * max_angle * std::numbers::pi / 180.0;
        const double cx = 15.5 + (4.0 * rng.uniform() - 2.0);
        const double cy = 15.5 + (4.0 * rng.uniform() - 2.0);
        const double half_len = 9.0 + 3.0 * rng.uniform();
        const double bg = 0.05 + 0.2 * rng.uniform();
        const double fg = 0.7 + 0.3 * rng.uniform();
        std::array<double, C> tint{};
        for (auto& t : tint) t = 0.85 + 0.15 * rng.uniform();
        // Two crossing bars through the center: 90 degrees apart for class 0,
        // 60 degrees apart for class 1.
        const double spread = (label == 0 ? 45.0 : 30.0) * std::numbers::pi / 180.0;
        const double dirs[2] = {angle + spread, angle - spread};
        constexpr double half_width = 1.25;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double a = 0.0;
                for (double dir : dirs) {
                    const double ux = std::cos(dir), uy = std::sin(dir);
                    const double d = segment_distance(static_cast<double>(x), static_cast<double>(y),
                                                      cx - half_len * ux, cy - half_len * uy, cx + half_len * ux,
                                                      cy + half_len * uy);
                    a = std::max(a, std::clamp(half_width + 0.5 - d, 0.0, 1.0));
                }
                for (std::size_t c = 0; c < C; ++c) {
                    const double v = bg + (fg * tint[c] - bg) * a + 0.03 * rng.normal();
                    ds.images[((i * C + c) * H + y) * W + x] = std::clamp(v, 0.0, 1.0);
                }
            }
    }
    return ds;
}

Batch gather(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    LabeledDataset part = take(ds, indices);
    return {std::move(part.images), std::move(part.labels)};
}

Tensor image(const LabeledDataset& ds, std::size_t i) {
    const Shape s = ds.image_shape();
    const std::size_t per = numel(s);
    Tensor out(s);
    std::copy_n(ds.images.data() + i * per, per, out.data());
    return out;
}

}  // namespace augsearch::data
