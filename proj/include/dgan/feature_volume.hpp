#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace dgan::features {

enum class Upsample { nearest, bilinear };

// One backbone feature map, (y, x, channel) row-major, 32-bit values.
// Immutable after construction; copies share the payload.
class FeatureMap {
public:
    FeatureMap() = default;
    // Throws DataError on zero-sized shapes, length mismatch or non-finite values.
    FeatureMap(std::size_t height, std::size_t width, std::size_t channels, std::vector<float> data);

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t channels() const noexcept { return channels_; }
    std::span<const float> data() const noexcept;

    float at(std::size_t x, std::size_t y, std::size_t c) const {
        return (*data_)[(y * width_ + x) * channels_ + c];
    }
    std::span<const float> pixel(std::size_t x, std::size_t y) const {
        return data().subspan((y * width_ + x) * channels_, channels_);
    }

    friend bool operator==(const FeatureMap& a, const FeatureMap& b);

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::size_t channels_ = 0;
    std::shared_ptr<const std::vector<float>> data_;
};

struct PixelFeature {
    std::vector<float> values;
    std::size_t x = 0;
    std::size_t y = 0;
};

// Ordered multi-resolution maps. The last map fixes the target resolution.
class FeatureVolume {
public:
    FeatureVolume() = default;
    // Throws DataError on an empty list or resolutions that shrink along the list.
    explicit FeatureVolume(std::vector<FeatureMap> maps);

    const std::vector<FeatureMap>& maps() const noexcept { return maps_; }
    std::size_t target_height() const noexcept { return target_h_; }
    std::size_t target_width() const noexcept { return target_w_; }
    std::size_t pixel_count() const noexcept { return target_h_ * target_w_; }
    // Total channel count D.
    std::size_t dimension() const noexcept { return dimension_; }

    friend bool operator==(const FeatureVolume&, const FeatureVolume&) = default;

private:
    std::vector<FeatureMap> maps_;
    std::size_t target_h_ = 0;
    std::size_t target_w_ = 0;
    std::size_t dimension_ = 0;
};

// Nearest replicates source pixels; bilinear samples at half-pixel centres
// with edge clamping and 64-bit accumulation.
FeatureMap upsample(const FeatureMap& map, std::size_t target_h, std::size_t target_w,
                    Upsample mode = Upsample::bilinear);

PixelFeature pixel_feature(const FeatureVolume& volume, std::size_t x, std::size_t y,
                           Upsample mode = Upsample::bilinear);

// Writes the D values for (x, y) into out (size D). No bounds check on x, y.
void pixel_feature_into(const FeatureVolume& volume, std::size_t x, std::size_t y, Upsample mode,
                        std::span<float> out);

// Rows [y0, y1) of the concatenated volume as a (pixels x D) row-major block.
void materialize_rows(const FeatureVolume& volume, std::size_t y0, std::size_t y1, Upsample mode,
                      std::span<float> out);

// Mean of all pixel features, accumulated in 64-bit.
std::vector<double> mean_pooled(const FeatureVolume& volume, Upsample mode = Upsample::bilinear);

// Row-major (x fastest) walk over every pixel feature of a volume. The stream
// keeps a reference to the volume, which must outlive it.
class PixelFeatureStream {
public:
    PixelFeatureStream(const FeatureVolume& volume, Upsample mode);

    std::optional<PixelFeature> next();
    std::size_t remaining() const noexcept { return total_ - index_; }

private:
    const FeatureVolume* volume_;
    Upsample mode_;
    std::size_t index_ = 0;
    std::size_t total_ = 0;
};

PixelFeatureStream iter_pixel_features(const FeatureVolume& volume, Upsample mode = Upsample::bilinear);

} // namespace dgan::features
