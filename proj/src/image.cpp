#include "cascade_detr/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "cascade_detr/errors.hpp"

namespace cdetr {

Image resize_image(const Image& src, std::size_t height, std::size_t width) {
    if (src.height == height && src.width == width) return src;
    if (src.height == 0 || src.width == 0) throw PreconditionError("resize_image: empty source image");
    Image out(height, width, src.channels);
    const double sy = static_cast<double>(src.height) / static_cast<double>(height);
    const double sx = static_cast<double>(src.width) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < src.channels; ++c) {
                const double top = (1.0 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
                const double bottom = (1.0 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
                out.at(y, x, c) = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    return out;
}

namespace {

// Reads the next whitespace-separated header token, skipping '#' comments.
std::string next_token(std::istream& in) {
    std::string token;
    char ch = 0;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string ignored;
            std::getline(in, ignored);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!token.empty()) break;
            continue;
        }
        token.push_back(ch);
    }
    return token;
}

}  // namespace

Image read_netpbm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open image " + path.string());
    const std::string magic = next_token(in);
    if (magic != "P6" && magic != "P5") throw Error(ErrorCode::parse, path.string() + ": unsupported image format (expected P5/P6)");
    std::size_t width = 0, height = 0, maxval = 0;
    try {
        width = std::stoul(next_token(in));
        height = std::stoul(next_token(in));
        maxval = std::stoul(next_token(in));
    } catch (const std::exception&) {
        throw Error(ErrorCode::parse, path.string() + ": malformed Netpbm header");
    }
    if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
        throw Error(ErrorCode::parse, path.string() + ": unsupported Netpbm dimensions or depth");
    }
    const std::size_t src_channels = magic == "P6" ? 3 : 1;
    std::vector<unsigned char> raw(width * height * src_channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw Error(ErrorCode::parse, path.string() + ": truncated pixel data");
    Image img(height, width, 3);
    const double scale = 1.0 / static_cast<double>(maxval);
    for (std::size_t i = 0; i < width * height; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            img.pixels[i * 3 + c] = raw[i * src_channels + (src_channels == 3 ? c : 0)] * scale;
        }
    }
    return img;
}

void write_ppm(const Image& image, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write image " + path.string());
    out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
    std::vector<unsigned char> raw(image.width * image.height * 3);
    for (std::size_t i = 0; i < image.width * image.height; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = image.pixels[i * image.channels + std::min(c, image.channels - 1)];
            raw[i * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw Error(ErrorCode::io, "failed writing image " + path.string());
}

}  // namespace cdetr
