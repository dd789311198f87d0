#include "dgan/feature_volume.hpp"

#include "dgan/error.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <string>

namespace dgan::features {

namespace {

struct Tap {
    std::size_t lo = 0;
    std::size_t hi = 0;
    double frac = 0.0;
};

// Source taps for output index `o` when resampling `src` samples to `dst`.
Tap axis_tap(std::size_t o, std::size_t src, std::size_t dst, Upsample mode) {
    if (mode == Upsample::nearest) {
        const std::size_t i = std::min(((2 * o + 1) * src) / (2 * dst), src - 1);
        return {i, i, 0.0};
    }
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    const std::size_t hi = std::min(lo + 1, src - 1);
    return {lo, hi, s - static_cast<double>(lo)};
}

std::vector<Tap> axis_taps(std::size_t src, std::size_t dst, Upsample mode) {
    std::vector<Tap> taps(dst);
    for (std::size_t o = 0; o < dst; ++o) taps[o] = axis_tap(o, src, dst, mode);
    return taps;
}

inline void blend(const FeatureMap& m, const Tap& tx, const Tap& ty, float* out) {
    const std::size_t c = m.channels();
    const float* a = m.data().data() + (ty.lo * m.width() + tx.lo) * c;
    if (tx.frac == 0.0 && ty.frac == 0.0) {
        std::copy(a, a + c, out);
        return;
    }
    const float* b = m.data().data() + (ty.lo * m.width() + tx.hi) * c;
    const float* d0 = m.data().data() + (ty.hi * m.width() + tx.lo) * c;
    const float* d1 = m.data().data() + (ty.hi * m.width() + tx.hi) * c;
    const double fx = tx.frac;
    const double fy = ty.frac;
    for (std::size_t k = 0; k < c; ++k) {
        const double top = (1.0 - fx) * a[k] + fx * b[k];
        const double bottom = (1.0 - fx) * d0[k] + fx * d1[k];
        out[k] = static_cast<float>((1.0 - fy) * top + fy * bottom);
    }
}

} // namespace

FeatureMap::FeatureMap(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels) {
    if (height == 0 || width == 0 || channels == 0) throw DataError("feature map: zero-sized shape");
    if (data.size() != height * width * channels) {
        throw DataError("feature map: data length " + std::to_string(data.size()) + " != " +
                        std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels));
    }
    if (!std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); })) {
        throw DataError("feature map: non-finite value");
    }
    data_ = std::make_shared<const std::vector<float>>(std::move(data));
}

std::span<const float> FeatureMap::data() const noexcept {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

bool operator==(const FeatureMap& a, const FeatureMap& b) {
    if (a.height_ != b.height_ || a.width_ != b.width_ || a.channels_ != b.channels_) return false;
    const auto da = a.data();
    const auto db = b.data();
    // Bitwise comparison so that -0.0 and 0.0 differ.
    return std::equal(da.begin(), da.end(), db.begin(), db.end(),
                      [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
}

FeatureVolume::FeatureVolume(std::vector<FeatureMap> maps) : maps_(std::move(maps)) {
    if (maps_.empty()) throw DataError("feature volume: empty map list");
    for (std::size_t i = 0; i < maps_.size(); ++i) {
        if (maps_[i].channels() == 0) throw DataError("feature volume: map " + std::to_string(i) + " is empty");
        if (i > 0 && (maps_[i].height() < maps_[i - 1].height() || maps_[i].width() < maps_[i - 1].width())) {
            throw DataError("feature volume: map " + std::to_string(i) + " is smaller than map " +
                            std::to_string(i - 1));
        }
        dimension_ += maps_[i].channels();
    }
    target_h_ = maps_.back().height();
    target_w_ = maps_.back().width();
}

FeatureMap upsample(const FeatureMap& map, std::size_t target_h, std::size_t target_w, Upsample mode) {
    if (map.height() == 0 || map.width() == 0 || map.channels() == 0) throw DataError("upsample: zero-sized map");
    if (target_h < map.height() || target_w < map.width()) throw DataError("upsample: target smaller than source");
    const auto tx = axis_taps(map.width(), target_w, mode);
    const auto ty = axis_taps(map.height(), target_h, mode);
    const std::size_t c = map.channels();
    std::vector<float> out(target_h * target_w * c);
    for (std::size_t y = 0; y < target_h; ++y) {
        for (std::size_t x = 0; x < target_w; ++x) blend(map, tx[x], ty[y], out.data() + (y * target_w + x) * c);
    }
    return FeatureMap(target_h, target_w, c, std::move(out));
}

void pixel_feature_into(const FeatureVolume& volume, std::size_t x, std::size_t y, Upsample mode,
                        std::span<float> out) {
    std::size_t offset = 0;
    for (const auto& m : volume.maps()) {
        const Tap tx = axis_tap(x, m.width(), volume.target_width(), mode);
        const Tap ty = axis_tap(y, m.height(), volume.target_height(), mode);
        blend(m, tx, ty, out.data() + offset);
        offset += m.channels();
    }
}

PixelFeature pixel_feature(const FeatureVolume& volume, std::size_t x, std::size_t y, Upsample mode) {
    if (x >= volume.target_width() || y >= volume.target_height()) {
        throw DataError("pixel_feature: (" + std::to_string(x) + ", " + std::to_string(y) + ") outside " +
                        std::to_string(volume.target_width()) + "x" + std::to_string(volume.target_height()));
    }
    PixelFeature f;
    f.x = x;
    f.y = y;
    f.values.resize(volume.dimension());
    pixel_feature_into(volume, x, y, mode, f.values);
    return f;
}

void materialize_rows(const FeatureVolume& volume, std::size_t y0, std::size_t y1, Upsample mode,
                      std::span<float> out) {
    const std::size_t w = volume.target_width();
    const std::size_t d = volume.dimension();
    if (y1 > volume.target_height() || y0 > y1) throw DataError("materialize_rows: row range out of bounds");
    if (out.size() < (y1 - y0) * w * d) throw DataError("materialize_rows: output buffer too small");
    std::size_t offset = 0;
    for (const auto& m : volume.maps()) {
        const auto tx = axis_taps(m.width(), w, mode);
        for (std::size_t y = y0; y < y1; ++y) {
            const Tap ty = axis_tap(y, m.height(), volume.target_height(), mode);
            float* row = out.data() + (y - y0) * w * d + offset;
            for (std::size_t x = 0; x < w; ++x) blend(m, tx[x], ty, row + x * d);
        }
        offset += m.channels();
    }
}

std::vector<double> mean_pooled(const FeatureVolume& volume, Upsample mode) {
    const std::size_t w = volume.target_width();
    const std::size_t d = volume.dimension();
    std::vector<double> sum(d, 0.0);
    std::vector<float> row(w * d);
    for (std::size_t y = 0; y < volume.target_height(); ++y) {
        materialize_rows(volume, y, y + 1, mode, row);
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t k = 0; k < d; ++k) sum[k] += row[x * d + k];
        }
    }
    const double n = static_cast<double>(volume.pixel_count());
    for (auto& v : sum) v /= n;
    return sum;
}

PixelFeatureStream::PixelFeatureStream(const FeatureVolume& volume, Upsample mode)
    : volume_(&volume), mode_(mode), total_(volume.pixel_count()) {
    if (volume.maps().empty()) throw DataError("pixel feature stream: empty volume");
}

std::optional<PixelFeature> PixelFeatureStream::next() {
    if (index_ >= total_) return std::nullopt;
    const std::size_t x = index_ % volume_->target_width();
    const std::size_t y = index_ / volume_->target_width();
    ++index_;
    return pixel_feature(*volume_, x, y, mode_);
}

PixelFeatureStream iter_pixel_features(const FeatureVolume& volume, Upsample mode) {
    return PixelFeatureStream(volume, mode);
}

} // namespace dgan::features
