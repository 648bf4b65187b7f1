#include "medcorpus/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

namespace medcorpus::imaging {

namespace {

constexpr char magic[4] = {'P', '2', 'T', 'N'};
constexpr std::uint8_t format_version = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

std::uint32_t get_u32(std::string_view bytes, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    }
    return v;
}

void require_hu(const Volume& v, const char* op) {
    if (v.unit != Unit::Hu) {
        throw ValidationError(std::string(op) + ": input must be in Hounsfield units");
    }
}

Volume load_series(const ImageSeries& series, const std::filesystem::path& base_dir, Unit unit) {
    Volume v = read_volume(base_dir / series.tensor_ref, unit);
    if (v.dims != series.dims) {
        throw ValidationError("tensor " + series.tensor_ref + " dims disagree with series metadata");
    }
    return v;
}

}  // namespace

std::string encode_tensor(const Tensor& tensor) {
    if (tensor.dims.empty() || tensor.dims.size() > 255) {
        throw ShapeError("tensor must have 1..255 dimensions");
    }
    std::size_t count = 1;
    for (auto d : tensor.dims) count *= d;
    if (count != tensor.values.size()) {
        throw ShapeError("tensor payload size does not match dims");
    }
    std::string out(magic, 4);
    out.push_back(static_cast<char>(format_version));
    out.push_back(static_cast<char>(tensor.dims.size()));
    for (auto d : tensor.dims) put_u32(out, d);
    out.reserve(out.size() + count * 4);
    for (float f : tensor.values) put_u32(out, std::bit_cast<std::uint32_t>(f));
    return out;
}

Tensor decode_tensor(std::string_view bytes) {
    if (bytes.size() < 6 || std::memcmp(bytes.data(), magic, 4) != 0) {
        throw ValidationError("not a P2TN tensor (bad magic)");
    }
    if (static_cast<std::uint8_t>(bytes[4]) != format_version) {
        throw ValidationError("unsupported P2TN version " + std::to_string(static_cast<unsigned char>(bytes[4])));
    }
    const std::size_t ndim = static_cast<unsigned char>(bytes[5]);
    const std::size_t header = 6 + 4 * ndim;
    if (ndim == 0 || bytes.size() < header) {
        throw ValidationError("truncated P2TN header");
    }
    Tensor t;
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        t.dims.push_back(get_u32(bytes, 6 + 4 * i));
        count *= t.dims.back();
    }
    if (bytes.size() != header + 4 * count) {
        throw ValidationError("P2TN payload length " + std::to_string(bytes.size() - header) +
                              " != product(dims) * 4 = " + std::to_string(4 * count));
    }
    t.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        t.values[i] = std::bit_cast<float>(get_u32(bytes, header + 4 * i));
    }
    return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& tensor) {
    write_file(path, encode_tensor(tensor));
}

Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void write_volume(const std::filesystem::path& path, const Volume& volume) {
    write_tensor(path, Tensor{{volume.dims.z, volume.dims.y, volume.dims.x}, volume.values});
}

Volume read_volume(const std::filesystem::path& path, Unit unit) {
    Tensor t = read_tensor(path);
    if (t.dims.size() != 3) {
        throw ShapeError(path.string() + ": expected a 3-D (z, y, x) tensor");
    }
    Volume v;
    v.dims = {t.dims[0], t.dims[1], t.dims[2]};
    v.values = std::move(t.values);
    v.unit = unit;
    return v;
}

// ---------------------------------------------------------------------------

Volume hu_window(const Volume& volume, const WindowSpec& spec) {
    require_hu(volume, "hu_window");
    if (!(spec.width > 0.0)) {
        throw ValidationError("hu_window: width must be positive");
    }
    const double lower = spec.level - spec.width / 2.0;
    Volume out(volume.dims, Unit::Normalized);
    std::transform(volume.values.begin(), volume.values.end(), out.values.begin(), [&](float v) {
        return static_cast<float>(std::clamp((static_cast<double>(v) - lower) / spec.width, 0.0, 1.0));
    });
    return out;
}

Volume resize_xy(const Volume& volume, std::uint32_t target) {
    if (volume.dims.y < 2 || volume.dims.x < 2 || target < 2) {
        throw ShapeError("resize_xy: y, x and target must all be >= 2");
    }
    if (volume.dims.y == target && volume.dims.x == target) {
        return volume;
    }
    Volume out({volume.dims.z, target, target}, volume.unit);
    const double sy = static_cast<double>(volume.dims.y - 1) / (target - 1);
    const double sx = static_cast<double>(volume.dims.x - 1) / (target - 1);

    // Corner-aligned source coordinates, shared by every slice.
    struct Tap {
        std::size_t i0, i1;
        double w;
    };
    auto taps = [](std::uint32_t n, std::uint32_t src, double scale) {
        std::vector<Tap> out(n);
        for (std::uint32_t i = 0; i < n; ++i) {
            const double pos = i * scale;
            auto i0 = static_cast<std::size_t>(std::floor(pos));
            i0 = std::min<std::size_t>(i0, src - 1);
            const std::size_t i1 = std::min<std::size_t>(i0 + 1, src - 1);
            out[i] = {i0, i1, pos - static_cast<double>(i0)};
        }
        return out;
    };
    const auto ty = taps(target, volume.dims.y, sy);
    const auto tx = taps(target, volume.dims.x, sx);

    for (std::size_t z = 0; z < volume.dims.z; ++z) {
        for (std::size_t y = 0; y < target; ++y) {
            const auto& [y0, y1, wy] = ty[y];
            for (std::size_t x = 0; x < target; ++x) {
                const auto& [x0, x1, wx] = tx[x];
                const double a = volume.at(z, y0, x0);
                const double b = volume.at(z, y0, x1);
                const double c = volume.at(z, y1, x0);
                const double d = volume.at(z, y1, x1);
                const double top = a + wx * (b - a);
                const double bottom = c + wx * (d - c);
                out.at(z, y, x) = static_cast<float>(top + wy * (bottom - top));
            }
        }
    }
    return out;
}

std::pair<Volume, Volume> pad_z(const Volume& a, const Volume& b) {
    if (a.dims.y != b.dims.y || a.dims.x != b.dims.x) {
        throw ShapeError("pad_z: in-plane dims differ");
    }
    auto grow = [](const Volume& v, std::uint32_t z) {
        Volume out = v;
        out.dims.z = z;
        out.values.resize(out.dims.count(), 0.0f);
        return out;
    };
    const std::uint32_t z = std::max(a.dims.z, b.dims.z);
    return {grow(a, z), grow(b, z)};
}

Volume minmax_normalize(const Volume& volume) {
    Volume out(volume.dims, Unit::Normalized);
    if (volume.values.empty()) {
        return out;
    }
    const auto [lo_it, hi_it] = std::minmax_element(volume.values.begin(), volume.values.end());
    const double lo = *lo_it;
    const double range = static_cast<double>(*hi_it) - lo;
    if (range <= 0.0) {
        return out;
    }
    std::transform(volume.values.begin(), volume.values.end(), out.values.begin(), [&](float v) {
        return static_cast<float>(std::clamp((v - lo) / range, 0.0, 1.0));
    });
    return out;
}

std::vector<PreprocessedImage> preprocess_study(const RadiologyStudy& study,
                                                const PreprocessConfig& config,
                                                const std::filesystem::path& base_dir) {
    std::vector<PreprocessedImage> out;
    auto by_kind = [](const PreprocessedImage& a, const PreprocessedImage& b) { return a.kind < b.kind; };

    if (study.modality == Modality::Xray) {
        for (const auto& series : study.series) {
            if (series.kind != SeriesKind::AP && series.kind != SeriesKind::LAT) {
                continue;
            }
            Volume raw = load_series(series, base_dir, Unit::Raw);
            out.push_back({series.kind, minmax_normalize(resize_xy(raw, config.target_size))});
        }
        std::sort(out.begin(), out.end(), by_kind);
        if (out.empty() || out.front().kind != SeriesKind::AP) {
            throw SeriesSelectionError("study " + study.study_id + ": no anteroposterior view");
        }
        return out;
    }

    for (const auto& series : study.series) {
        if (std::abs(series.slice_thickness_mm - config.slice_thickness_mm) > config.thickness_tolerance) {
            continue;
        }
        Volume raw = load_series(series, base_dir, Unit::Hu);
        out.push_back({series.kind, resize_xy(hu_window(raw, config.window), config.target_size)});
    }
    std::sort(out.begin(), out.end(), by_kind);
    if (out.empty() || out.front().kind != SeriesKind::NON_CON) {
        throw SeriesSelectionError("study " + study.study_id + ": no non-contrast series with " +
                                   std::to_string(config.slice_thickness_mm) + " mm slices");
    }
    if (out.size() == 2) {
        auto [a, b] = pad_z(out[0].volume, out[1].volume);
        out[0].volume = std::move(a);
        out[1].volume = std::move(b);
    }
    return out;
}

}  // namespace medcorpus::imaging
