#include "pavecrack/augmentation.hpp"

#include <algorithm>
#include <array>
#include <set>

#include <opencv2/core.hpp>

#include "pavecrack/errors.hpp"

namespace pavecrack {
namespace {

struct NamedTransform {
    std::string_view name;
    Transform transform;
};

constexpr std::array<NamedTransform, 8> kNames{{
    {"id", Transform::identity()},
    {"hflip", Transform::hflip()},
    {"vflip", Transform::vflip()},
    {"rot90", Transform::rot90()},
    {"rot180", Transform::rot180()},
    {"rot270", Transform::rot270()},
    {"transpose", Transform(3, true)},   // mirror about the main diagonal
    {"transverse", Transform(1, true)},  // mirror about the anti-diagonal
}};

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Transform Transform::parse(std::string_view tag) {
    Transform result;
    std::size_t pos = 0;
    while (pos <= tag.size()) {
        const auto next = tag.find('+', pos);
        const std::string piece = trim(tag.substr(pos, next == std::string_view::npos ? tag.npos : next - pos));
        const auto it = std::find_if(kNames.begin(), kNames.end(),
                                     [&](const NamedTransform& n) { return n.name == piece; });
        if (it == kNames.end()) {
            throw FormatError("unknown transform '" + piece + "'");
        }
        result = result.then(it->transform);
        if (next == std::string_view::npos) break;
        pos = next + 1;
    }
    return result;
}

std::string Transform::tag() const {
    for (const auto& n : kNames) {
        if (n.transform == *this) return std::string(n.name);
    }
    return "id";  // unreachable: all eight group elements are named
}

Transform Transform::then(Transform next) const {
    // next(this(x)) = R^kn H^fn R^k H^f = R^(kn + (fn ? -k : k)) H^(fn xor f)
    const int turns = next.turns_ + (next.mirrored_ ? -turns_ : turns_);
    return {turns, next.mirrored_ != mirrored_};
}

cv::Mat Transform::apply(const cv::Mat& image) const {
    cv::Mat out = image.clone();
    if (mirrored_) cv::flip(out, out, 1);
    switch (turns_) {
        case 1: cv::rotate(out, out, cv::ROTATE_90_CLOCKWISE); break;
        case 2: cv::rotate(out, out, cv::ROTATE_180); break;
        case 3: cv::rotate(out, out, cv::ROTATE_90_COUNTERCLOCKWISE); break;
        default: break;
    }
    return out;
}

TransformSet::TransformSet(std::vector<Transform> transforms) {
    if (std::find(transforms.begin(), transforms.end(), Transform::identity()) == transforms.end()) {
        transforms.insert(transforms.begin(), Transform::identity());
    }
    std::set<std::string> seen;
    for (const auto& t : transforms) {
        if (!seen.insert(t.tag()).second) {
            throw DomainError("duplicate transform '" + t.tag() + "' in transform set");
        }
    }
    transforms_ = std::move(transforms);
}

TransformSet TransformSet::dihedral_default() {
    return TransformSet({Transform::identity(), Transform::hflip(), Transform::vflip(),
                         Transform::rot90(), Transform::rot180(), Transform::rot270()});
}

TransformSet TransformSet::parse(std::string_view list) {
    std::vector<Transform> out;
    std::size_t pos = 0;
    while (pos < list.size()) {
        auto next = list.find(',', pos);
        if (next == std::string_view::npos) next = list.size();
        const std::string piece = trim(list.substr(pos, next - pos));
        if (!piece.empty()) out.push_back(Transform::parse(piece));
        pos = next + 1;
    }
    return TransformSet(std::move(out));
}

bool TransformSet::has_quarter_turn() const {
    return std::any_of(transforms_.begin(), transforms_.end(),
                       [](const Transform& t) { return t.changes_aspect(); });
}

std::vector<PatchSample> augment_sample(const PatchSample& sample, const TransformSet& set) {
    if (sample.pixels.rows != sample.pixels.cols && set.has_quarter_turn()) {
        throw GeometryError("quarter-turn rotation of a non-square patch (" +
                            std::to_string(sample.pixels.cols) + "x" +
                            std::to_string(sample.pixels.rows) + ")");
    }
    const Transform base = Transform::parse(sample.transform_tag);
    std::vector<PatchSample> out;
    out.reserve(set.size());
    for (const auto& t : set.transforms()) {
        PatchSample s = sample;
        if (t.is_identity()) {
            s.pixels = sample.pixels.clone();
        } else {
            s.pixels = t.apply(sample.pixels);
            s.transform_tag = base.then(t).tag();
        }
        out.push_back(std::move(s));
    }
    return out;
}

DatasetManifest expand_dataset(const DatasetManifest& manifest, const TransformSet& set,
                               const std::vector<Split>& splits_to_expand) {
    for (const Split s : splits_to_expand) {
        if (manifest.split_count(s) == 0) {
            throw CapacityError("cannot expand empty split '" + std::string(split_name(s)) + "'");
        }
    }
    DatasetManifest out = manifest;
    out.entries.clear();
    out.entries.reserve(manifest.entries.size() * set.size());
    for (const auto& e : manifest.entries) {
        const bool expand = std::find(splits_to_expand.begin(), splits_to_expand.end(), e.split) !=
                            splits_to_expand.end();
        if (!expand) {
            out.entries.push_back(e);
            continue;
        }
        const Transform base = Transform::parse(e.ref.transform_tag);
        for (const auto& t : set.transforms()) {
            ManifestEntry copy = e;
            copy.ref.transform_tag = base.then(t).tag();
            out.entries.push_back(std::move(copy));
        }
    }
    return out;
}

}  // namespace pavecrack
