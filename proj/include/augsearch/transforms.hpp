#pragma once

#include <optional>
#include <span>
#include <string_view>

#include "augsearch/autodiff.hpp"

// Elementary image transformations over images in [0, 1], laid out as
// [C, H, W] (single image) or [B, C, H, W] (batch). Magnitudes arrive
// normalized to (0, 1) and are mapped affinely onto each transform's native
// range. Geometric transforms inverse-warp with bilinear sampling about the
// image center and fill with zeros. Every output is clamped to [0, 1].
namespace augsearch::transforms {

enum class Kind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Solarize,
    Posterize,
    Contrast,
    Color,
    Brightness,
    Sharpness,
    AutoContrast,
    Invert,
    Equalize,
};

struct MagnitudeRange {
    double low;
    double high;
};

struct TransformSpec {
    Kind kind;
    std::string_view name;
    std::optional<MagnitudeRange> range;  // absent for magnitude-free transforms
    // False for kernels that are piecewise constant in their magnitude
    // (Solarize, Posterize); those receive a straight-through unit gradient.
    bool magnitude_differentiable;
};

inline constexpr std::size_t kNumTransforms = 14;

/// Search-space order: ShearX, ShearY, TranslateX, TranslateY, Rotate,
/// Solarize, Posterize, Contrast, Color, Brightness, Sharpness, AutoContrast,
/// Invert, Equalize.
std::span<const TransformSpec> registry();
const TransformSpec& spec(Kind kind);
std::optional<Kind> find(std::string_view name);

/// low + m01 * (high - low). Throws UsageError for magnitude-free transforms.
double scale_magnitude(const TransformSpec& spec, double m01);

/// Forward-only application to a single [C, H, W] image.
Tensor apply_value(const TransformSpec& spec, const Tensor& image, double m01);

/// Differentiable application. `x` is [C, H, W] with a one-element `m01`, or
/// [B, C, H, W] with `m01` of shape [B]. Gradients flow to x and, where the
/// transform has a magnitude, to m01.
ad::Var apply(const TransformSpec& spec, const ad::Var& x, const ad::Var& m01);

}  // namespace augsearch::transforms
