#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "medcorpus/corpus.hpp"

namespace medcorpus::imaging {

enum class Unit { Hu, Raw, Normalized };

/// Dense float volume, row-major with z outermost.
struct Volume {
    VolumeDims dims;
    std::vector<float> values;
    Unit unit = Unit::Raw;

    Volume() = default;
    Volume(VolumeDims d, Unit u, float fill = 0.0f) : dims(d), values(d.count(), fill), unit(u) {}

    float& at(std::size_t z, std::size_t y, std::size_t x) {
        return values[(z * dims.y + y) * dims.x + x];
    }
    float at(std::size_t z, std::size_t y, std::size_t x) const {
        return values[(z * dims.y + y) * dims.x + x];
    }

    std::span<const float> slice(std::size_t z) const {
        const std::size_t n = std::size_t{dims.y} * dims.x;
        return {values.data() + z * n, n};
    }

    bool operator==(const Volume&) const = default;
};

struct WindowSpec {
    double level = -500.0;
    double width = 1200.0;
};

// ---------------------------------------------------------------------------
// P2TN tensor files: magic "P2TN", u8 version (1), u8 ndim, ndim u32 dims,
// float32 payload. Everything little-endian.
// ---------------------------------------------------------------------------

struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;

    bool operator==(const Tensor&) const = default;
};

std::string encode_tensor(const Tensor& tensor);
Tensor decode_tensor(std::string_view bytes);
void write_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor read_tensor(const std::filesystem::path& path);

/// 3-D volumes map to (z, y, x) tensors.
void write_volume(const std::filesystem::path& path, const Volume& volume);
Volume read_volume(const std::filesystem::path& path, Unit unit);

// ---------------------------------------------------------------------------
// Transforms
// ---------------------------------------------------------------------------

/// clamp((v - (level - width/2)) / width, 0, 1). Requires unit == Hu.
Volume hu_window(const Volume& volume, const WindowSpec& spec = {});

/// Bilinear, corner-aligned resize of every slice to target x target.
Volume resize_xy(const Volume& volume, std::uint32_t target = 336);

/// Zero-pads the shorter volume at the tail of z so both have the same depth.
std::pair<Volume, Volume> pad_z(const Volume& a, const Volume& b);

/// Per-volume min-max scaling to [0, 1]; a constant volume maps to zeros.
Volume minmax_normalize(const Volume& volume);

struct PreprocessConfig {
    std::uint32_t target_size = 336;
    WindowSpec window;
    double slice_thickness_mm = 5.0;
    double thickness_tolerance = 1e-6;
};

struct PreprocessedImage {
    SeriesKind kind = SeriesKind::AP;
    Volume volume;
};

/// X-ray: keep AP (+LAT), resize, min-max. CT: keep series whose slice
/// thickness matches, window, resize, pad NON_CON/CE to equal depth.
/// Tensor refs are resolved relative to `base_dir`. Throws
/// SeriesSelectionError when a CT study has no matching NON_CON series.
std::vector<PreprocessedImage> preprocess_study(const RadiologyStudy& study,
                                                const PreprocessConfig& config,
                                                const std::filesystem::path& base_dir);

}  // namespace medcorpus::imaging
