#include "dgan/image.hpp"

#include "dgan/error.hpp"

#include <png.h>

#include <csetjmp>

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dgan {

namespace {

struct WriteSink {
    std::vector<std::uint8_t> bytes;
};

void sink_write(png_structp png, png_bytep data, png_size_t length) {
    auto* sink = static_cast<WriteSink*>(png_get_io_ptr(png));
    sink->bytes.insert(sink->bytes.end(), data, data + length);
}

void sink_flush(png_structp) {}

struct ReadSource {
    std::span<const std::uint8_t> bytes;
    std::size_t offset = 0;
};

void source_read(png_structp png, png_bytep data, png_size_t length) {
    auto* src = static_cast<ReadSource*>(png_get_io_ptr(png));
    if (src->offset + length > src->bytes.size()) png_error(png, "truncated PNG");
    std::memcpy(data, src->bytes.data() + src->offset, length);
    src->offset += length;
}

struct ErrorSlot {
    std::string message;
};

void png_fail(png_structp png, png_const_charp msg) {
    static_cast<ErrorSlot*>(png_get_error_ptr(png))->message = msg;
    png_longjmp(png, 1);
}
void png_warn(png_structp, png_const_charp) {}

class PngWriter {
public:
    PngWriter() {
        png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error_, png_fail, png_warn);
        if (png_ == nullptr) throw DataError("png: cannot create write struct");
        info_ = png_create_info_struct(png_);
        if (info_ == nullptr) {
            png_destroy_write_struct(&png_, nullptr);
            throw DataError("png: cannot create info struct");
        }
        png_set_write_fn(png_, &sink_, sink_write, sink_flush);
        png_set_compression_level(png_, 6);
    }
    ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
    PngWriter(const PngWriter&) = delete;
    PngWriter& operator=(const PngWriter&) = delete;

    png_structp png() { return png_; }
    png_infop info() { return info_; }
    const std::string& error() const { return error_.message; }
    std::vector<std::uint8_t> take() { return std::move(sink_.bytes); }

private:
    ErrorSlot error_;
    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
    WriteSink sink_;
};

class PngReader {
public:
    explicit PngReader(std::span<const std::uint8_t> bytes) : source_{bytes, 0} {
        if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw DataError("png: bad signature");
        png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error_, png_fail, png_warn);
        if (png_ == nullptr) throw DataError("png: cannot create read struct");
        info_ = png_create_info_struct(png_);
        if (info_ == nullptr) {
            png_destroy_read_struct(&png_, nullptr, nullptr);
            throw DataError("png: cannot create info struct");
        }
        png_set_read_fn(png_, &source_, source_read);
    }
    ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
    PngReader(const PngReader&) = delete;
    PngReader& operator=(const PngReader&) = delete;

    png_structp png() { return png_; }
    png_infop info() { return info_; }
    const std::string& error() const { return error_.message; }

private:
    ErrorSlot error_;
    ReadSource source_;
    png_structp png_ = nullptr;
    png_infop info_ = nullptr;
};

// All C++ objects touched after a libpng call are created before setjmp, so
// a longjmp back here never skips a destructor.
std::vector<std::uint8_t> write_image(PngWriter& w, std::vector<png_bytep>& rows) {
    if (setjmp(png_jmpbuf(w.png()))) throw DataError("png: " + w.error());
    png_write_info(w.png(), w.info());
    png_write_image(w.png(), rows.data());
    png_write_end(w.png(), nullptr);
    return w.take();
}

std::vector<png_bytep> row_pointers(const std::uint8_t* data, std::size_t height, std::size_t stride) {
    std::vector<png_bytep> rows(height);
    for (std::size_t y = 0; y < height; ++y) rows[y] = const_cast<png_bytep>(data + y * stride);
    return rows;
}

struct Header {
    png_uint_32 width = 0;
    png_uint_32 height = 0;
    std::size_t rowbytes = 0;
};

// `palette` selects the decode path: raw indices or expanded RGB.
Header read_header(PngReader& r, bool palette) {
    if (setjmp(png_jmpbuf(r.png()))) throw DataError("png: " + r.error());
    png_read_info(r.png(), r.info());
    const auto color = png_get_color_type(r.png(), r.info());
    const auto depth = png_get_bit_depth(r.png(), r.info());
    if (palette) {
        if (color != PNG_COLOR_TYPE_PALETTE) return {};
        if (depth < 8) png_set_packing(r.png());
    } else {
        if (depth == 16) png_set_strip_16(r.png());
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png());
        if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
            if (depth < 8) png_set_expand_gray_1_2_4_to_8(r.png());
            png_set_gray_to_rgb(r.png());
        }
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png());
    }
    png_read_update_info(r.png(), r.info());
    return {png_get_image_width(r.png(), r.info()), png_get_image_height(r.png(), r.info()),
            png_get_rowbytes(r.png(), r.info())};
}

void read_rows(PngReader& r, std::vector<png_bytep>& rows) {
    if (setjmp(png_jmpbuf(r.png()))) throw DataError("png: " + r.error());
    png_read_image(r.png(), rows.data());
    png_read_end(r.png(), nullptr);
}

} // namespace

std::vector<std::uint8_t> encode_png_rgb(const RgbImage& image) {
    if (image.height == 0 || image.width == 0) throw DataError("png: empty image");
    PngWriter w;
    auto rows = row_pointers(image.pixels.data(), image.height, image.width * 3);
    png_set_IHDR(w.png(), w.info(), static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    return write_image(w, rows);
}

std::vector<std::uint8_t> encode_png_indexed(const LabelMask& mask, std::span<const Rgb> palette) {
    if (mask.height == 0 || mask.width == 0) throw DataError("png: empty mask");
    if (palette.size() > 256) throw DataError("png: palette larger than 256 entries");
    PngWriter w;
    auto rows = row_pointers(mask.labels.data(), mask.height, mask.width);
    std::vector<png_color> colors(256, png_color{0, 0, 0});
    for (std::size_t i = 0; i < palette.size(); ++i) {
        colors[i] = png_color{palette[i][0], palette[i][1], palette[i][2]};
    }
    png_set_IHDR(w.png(), w.info(), static_cast<png_uint_32>(mask.width),
                 static_cast<png_uint_32>(mask.height), 8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_PLTE(w.png(), w.info(), colors.data(), 256);
    return write_image(w, rows);
}

RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes) {
    PngReader r(bytes);
    const Header h = read_header(r, false);
    RgbImage image(h.height, h.width);
    if (h.rowbytes != image.width * 3) throw DataError("png: unexpected row size");
    auto rows = row_pointers(image.pixels.data(), image.height, image.width * 3);
    read_rows(r, rows);
    return image;
}

LabelMask decode_png_indexed(std::span<const std::uint8_t> bytes) {
    PngReader r(bytes);
    const Header h = read_header(r, true);
    if (h.width == 0) throw DataError("png: mask is not palette-indexed");
    LabelMask mask(h.height, h.width);
    if (h.rowbytes != mask.width) throw DataError("png: unexpected row size");
    auto rows = row_pointers(mask.labels.data(), mask.height, mask.width);
    read_rows(r, rows);
    return mask;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw DataError("write failed: " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace dgan
