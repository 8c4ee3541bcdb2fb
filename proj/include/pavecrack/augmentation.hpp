#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <opencv2/core.hpp>

#include "pavecrack/dataset.hpp"

namespace pavecrack {

/// Element of the dihedral group of the square: a horizontal mirror (optional) followed by
/// `quarter_turns` clockwise rotations. All six named transforms are members, and so is any
/// composition of them, so stacked augmentations always reduce to one canonical tag.
class Transform {
public:
    constexpr Transform() = default;
    constexpr Transform(int quarter_turns, bool mirrored)
        : turns_(((quarter_turns % 4) + 4) % 4), mirrored_(mirrored) {}

    static constexpr Transform identity() { return {0, false}; }
    static constexpr Transform hflip() { return {0, true}; }
    static constexpr Transform vflip() { return {2, true}; }
    static constexpr Transform rot90() { return {1, false}; }
    static constexpr Transform rot180() { return {2, false}; }
    static constexpr Transform rot270() { return {3, false}; }

    /// Parses a tag such as "rot90" or a '+'-joined chain "hflip+rot90" (applied left to right).
    static Transform parse(std::string_view tag);
    std::string tag() const;

    int quarter_turns() const { return turns_; }
    bool mirrored() const { return mirrored_; }
    bool is_identity() const { return turns_ == 0 && !mirrored_; }
    bool changes_aspect() const { return turns_ % 2 == 1; }

    /// Transform equivalent to applying `*this` first and then `next`.
    Transform then(Transform next) const;

    cv::Mat apply(const cv::Mat& image) const;

    bool operator==(const Transform&) const = default;

private:
    int turns_ = 0;
    bool mirrored_ = false;
};

/// Ordered, duplicate-free transform list that always contains identity.
class TransformSet {
public:
    /// Identity is inserted at the front when absent. Duplicates throw DomainError.
    explicit TransformSet(std::vector<Transform> transforms);

    /// {identity, hflip, vflip, rot90, rot180, rot270}
    static TransformSet dihedral_default();
    /// Comma-separated tags, e.g. "hflip,vflip,rot90".
    static TransformSet parse(std::string_view list);

    const std::vector<Transform>& transforms() const { return transforms_; }
    std::size_t size() const { return transforms_.size(); }
    bool has_quarter_turn() const;

private:
    std::vector<Transform> transforms_;
};

/// One output per transform, label and source identity carried over.
/// Throws GeometryError for a non-square patch when the set contains a quarter turn.
std::vector<PatchSample> augment_sample(const PatchSample& sample, const TransformSet& set);

/// Grows the selected splits by |set|; other splits are copied unchanged.
/// Throws CapacityError when a selected split is empty.
DatasetManifest expand_dataset(const DatasetManifest& manifest, const TransformSet& set,
                               const std::vector<Split>& splits_to_expand = {Split::Train});

}  // namespace pavecrack
