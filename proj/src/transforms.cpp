#include "augsearch/transforms.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "augsearch/errors.hpp"

namespace augsearch::transforms {

namespace {

constexpr std::array<TransformSpec, kNumTransforms> kRegistry = {{
    {Kind::ShearX, "ShearX", MagnitudeRange{-0.6, 0.6}, true},
    {Kind::ShearY, "ShearY", MagnitudeRange{-0.6, 0.6}, true},
    {Kind::TranslateX, "TranslateX", MagnitudeRange{-0.5, 0.5}, true},
    {Kind::TranslateY, "TranslateY", MagnitudeRange{-0.5, 0.5}, true},
    {Kind::Rotate, "Rotate", MagnitudeRange{-30.0, 30.0}, true},
    {Kind::Solarize, "Solarize", MagnitudeRange{0.6, 1.0}, false},
    {Kind::Posterize, "Posterize", MagnitudeRange{2.0, 8.0}, false},
    {Kind::Contrast, "Contrast", MagnitudeRange{0.4, 2.0}, true},
    {Kind::Color, "Color", MagnitudeRange{0.0, 1.0}, true},
    {Kind::Brightness, "Brightness", MagnitudeRange{-0.4, 0.4}, true},
    {Kind::Sharpness, "Sharpness", MagnitudeRange{0.0, 2.0}, true},
    {Kind::AutoContrast, "AutoContrast", std::nullopt, true},
    {Kind::Invert, "Invert", std::nullopt, true},
    {Kind::Equalize, "Equalize", std::nullopt, true},
}};

struct Dims {
    std::size_t c, h, w;
    std::size_t plane() const { return h * w; }
    std::size_t size() const { return c * h * w; }
};

// Luma weights for 3-channel images; other channel counts average.
double luma_weight(const Dims& d, std::size_t ch) {
    if (d.c == 3) {
        constexpr double w[3] = {0.299, 0.587, 0.114};
        return w[ch];
    }
    return 1.0 / static_cast<double>(d.c);
}

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// ---------------------------------------------------------------------------
// geometric warps

struct SourcePoint {
    double sx, sy;    // source coordinates of an output pixel
    double dsx, dsy;  // derivatives with respect to the native magnitude
};

SourcePoint source_point(Kind kind, const Dims& d, double v, double x, double y) {
    const double cx = (static_cast<double>(d.w) - 1.0) / 2.0;
    const double cy = (static_cast<double>(d.h) - 1.0) / 2.0;
    switch (kind) {
        case Kind::ShearX: return {x + v * (y - cy), y, y - cy, 0.0};
        case Kind::ShearY: return {x, y + v * (x - cx), 0.0, x - cx};
        case Kind::TranslateX: {
            const double W = static_cast<double>(d.w);
            return {x - v * W, y, -W, 0.0};
        }
        case Kind::TranslateY: {
            const double H = static_cast<double>(d.h);
            return {x, y - v * H, 0.0, -H};
        }
        case Kind::Rotate: {
            const double k = std::numbers::pi / 180.0;
            const double th = v * k;
            const double c = std::cos(th), s = std::sin(th);
            const double dx = x - cx, dy = y - cy;
            return {cx + c * dx + s * dy, cy - s * dx + c * dy, k * (-s * dx + c * dy), k * (-c * dx - s * dy)};
        }
        default: throw UsageError("source_point: not a geometric transform");
    }
}

struct Bilinear {
    std::ptrdiff_t x0, y0;
    double fx, fy;
};

Bilinear bilinear_at(double sx, double sy) {
    const double fx0 = std::floor(sx), fy0 = std::floor(sy);
    return {static_cast<std::ptrdiff_t>(fx0), static_cast<std::ptrdiff_t>(fy0), sx - fx0, sy - fy0};
}

double pixel(const double* plane, const Dims& d, std::ptrdiff_t x, std::ptrdiff_t y) {
    if (x < 0 || y < 0 || x >= static_cast<std::ptrdiff_t>(d.w) || y >= static_cast<std::ptrdiff_t>(d.h)) return 0.0;
    return plane[static_cast<std::size_t>(y) * d.w + static_cast<std::size_t>(x)];
}

void warp_forward(Kind kind, const Dims& d, const double* x, double v, double* out) {
    for (std::size_t py = 0; py < d.h; ++py)
        for (std::size_t px = 0; px < d.w; ++px) {
            const SourcePoint sp = source_point(kind, d, v, static_cast<double>(px), static_cast<double>(py));
            const Bilinear b = bilinear_at(sp.sx, sp.sy);
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* plane = x + c * d.plane();
                const double v00 = pixel(plane, d, b.x0, b.y0);
                const double v10 = pixel(plane, d, b.x0 + 1, b.y0);
                const double v01 = pixel(plane, d, b.x0, b.y0 + 1);
                const double v11 = pixel(plane, d, b.x0 + 1, b.y0 + 1);
                out[c * d.plane() + py * d.w + px] = (1 - b.fy) * ((1 - b.fx) * v00 + b.fx * v10) +
                                                     b.fy * ((1 - b.fx) * v01 + b.fx * v11);
            }
        }
}

void warp_backward(Kind kind, const Dims& d, const double* x, double v, const double* g, double* gx, double* gv) {
    for (std::size_t py = 0; py < d.h; ++py)
        for (std::size_t px = 0; px < d.w; ++px) {
            const SourcePoint sp = source_point(kind, d, v, static_cast<double>(px), static_cast<double>(py));
            const Bilinear b = bilinear_at(sp.sx, sp.sy);
            const double w00 = (1 - b.fx) * (1 - b.fy), w10 = b.fx * (1 - b.fy);
            const double w01 = (1 - b.fx) * b.fy, w11 = b.fx * b.fy;
            for (std::size_t c = 0; c < d.c; ++c) {
                const double go = g[c * d.plane() + py * d.w + px];
                if (go == 0.0) continue;
                const double* plane = x + c * d.plane();
                if (gx) {
                    double* gplane = gx + c * d.plane();
                    auto scatter = [&](std::ptrdiff_t qx, std::ptrdiff_t qy, double w) {
                        if (qx < 0 || qy < 0 || qx >= static_cast<std::ptrdiff_t>(d.w) ||
                            qy >= static_cast<std::ptrdiff_t>(d.h))
                            return;
                        gplane[static_cast<std::size_t>(qy) * d.w + static_cast<std::size_t>(qx)] += go * w;
                    };
                    scatter(b.x0, b.y0, w00);
                    scatter(b.x0 + 1, b.y0, w10);
                    scatter(b.x0, b.y0 + 1, w01);
                    scatter(b.x0 + 1, b.y0 + 1, w11);
                }
                if (gv) {
                    const double v00 = pixel(plane, d, b.x0, b.y0);
                    const double v10 = pixel(plane, d, b.x0 + 1, b.y0);
                    const double v01 = pixel(plane, d, b.x0, b.y0 + 1);
                    const double v11 = pixel(plane, d, b.x0 + 1, b.y0 + 1);
                    const double dval_dsx = (1 - b.fy) * (v10 - v00) + b.fy * (v11 - v01);
                    const double dval_dsy = (1 - b.fx) * (v01 - v00) + b.fx * (v11 - v10);
                    *gv += go * (dval_dsx * sp.dsx + dval_dsy * sp.dsy);
                }
            }
        }
}

// ---------------------------------------------------------------------------
// photometric kernels

std::array<std::uint8_t, 256> equalize_lut(const double* plane, std::size_t n, bool& identity) {
    std::array<std::size_t, 256> hist{};
    for (std::size_t i = 0; i < n; ++i) ++hist[to_u8(plane[i])];
    std::array<std::uint8_t, 256> lut{};
    identity = true;
    std::size_t last = 0, nonzero = 0;
    for (std::size_t i = 0; i < 256; ++i)
        if (hist[i] > 0) {
            last = i;
            ++nonzero;
        }
    if (nonzero <= 1) return lut;
    const std::size_t step = (n - hist[last]) / 255;
    if (step == 0) return lut;
    identity = false;
    std::size_t acc = step / 2;
    for (std::size_t i = 0; i < 256; ++i) {
        lut[i] = static_cast<std::uint8_t>(std::min<std::size_t>(255, acc / step));
        acc += hist[i];
    }
    return lut;
}

void blur3(const Dims& d, const double* x, double* out) {
    for (std::size_t c = 0; c < d.c; ++c) {
        const double* p = x + c * d.plane();
        double* o = out + c * d.plane();
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t xx = 0; xx < d.w; ++xx) {
                const std::size_t i = y * d.w + xx;
                if (y == 0 || xx == 0 || y + 1 == d.h || xx + 1 == d.w) {
                    o[i] = p[i];
                    continue;
                }
                double s = 4.0 * p[i];
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) s += p[(y + dy) * d.w + (xx + dx)];
                o[i] = s / 13.0;
            }
    }
}

// Adjoint of blur3.
void blur3_transpose(const Dims& d, const double* g, double* out) {
    for (std::size_t c = 0; c < d.c; ++c) {
        const double* gp = g + c * d.plane();
        double* o = out + c * d.plane();
        for (std::size_t y = 0; y < d.h; ++y)
            for (std::size_t xx = 0; xx < d.w; ++xx) {
                const std::size_t i = y * d.w + xx;
                if (y == 0 || xx == 0 || y + 1 == d.h || xx + 1 == d.w) {
                    o[i] += gp[i];
                    continue;
                }
                const double k = gp[i] / 13.0;
                o[i] += 4.0 * k;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) o[(y + dy) * d.w + (xx + dx)] += k;
            }
    }
}

bool is_geometric(Kind k) {
    return k == Kind::ShearX || k == Kind::ShearY || k == Kind::TranslateX || k == Kind::TranslateY ||
           k == Kind::Rotate;
}

// Unclamped kernel output for one image at native magnitude v.
void forward_raw(Kind kind, const Dims& d, const double* x, double v, double* raw) {
    const std::size_t n = d.size();
    if (is_geometric(kind)) {
        warp_forward(kind, d, x, v, raw);
        return;
    }
    switch (kind) {
        case Kind::Solarize:
            for (std::size_t i = 0; i < n; ++i) raw[i] = x[i] < v ? x[i] : 1.0 - x[i];
            break;
        case Kind::Posterize: {
            const int bits = std::clamp(static_cast<int>(std::lround(v)), 1, 8);
            const std::uint8_t mask = static_cast<std::uint8_t>(0xFF << (8 - bits));
            for (std::size_t i = 0; i < n; ++i) raw[i] = static_cast<double>(to_u8(x[i]) & mask) / 255.0;
            break;
        }
        case Kind::Contrast: {
            double mu = 0.0;
            for (std::size_t c = 0; c < d.c; ++c) {
                double s = 0.0;
                for (std::size_t p = 0; p < d.plane(); ++p) s += x[c * d.plane() + p];
                mu += luma_weight(d, c) * s;
            }
            mu /= static_cast<double>(d.plane());
            for (std::size_t i = 0; i < n; ++i) raw[i] = mu + v * (x[i] - mu);
            break;
        }
        case Kind::Color:
            for (std::size_t p = 0; p < d.plane(); ++p) {
                double gray = 0.0;
                for (std::size_t c = 0; c < d.c; ++c) gray += luma_weight(d, c) * x[c * d.plane() + p];
                for (std::size_t c = 0; c < d.c; ++c) {
                    const std::size_t i = c * d.plane() + p;
                    raw[i] = gray + v * (x[i] - gray);
                }
            }
            break;
        case Kind::Brightness:
            for (std::size_t i = 0; i < n; ++i) raw[i] = x[i] + v;
            break;
        case Kind::Sharpness: {
            std::vector<double> blur(n);
            blur3(d, x, blur.data());
            for (std::size_t i = 0; i < n; ++i) raw[i] = blur[i] + v * (x[i] - blur[i]);
            break;
        }
        case Kind::AutoContrast:
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* p = x + c * d.plane();
                const auto [lo, hi] = std::minmax_element(p, p + d.plane());
                const double range = *hi - *lo;
                for (std::size_t q = 0; q < d.plane(); ++q)
                    raw[c * d.plane() + q] = range > 1e-12 ? (p[q] - *lo) / range : p[q];
            }
            break;
        case Kind::Invert:
            for (std::size_t i = 0; i < n; ++i) raw[i] = 1.0 - x[i];
            break;
        case Kind::Equalize:
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* p = x + c * d.plane();
                bool identity = true;
                const auto lut = equalize_lut(p, d.plane(), identity);
                for (std::size_t q = 0; q < d.plane(); ++q)
                    raw[c * d.plane() + q] = identity ? p[q] : static_cast<double>(lut[to_u8(p[q])]) / 255.0;
            }
            break;
        default: throw UsageError("forward_raw: unhandled transform");
    }
}

// Accumulates d(loss)/dx into gx (if non-null) and d(loss)/dv into *gv (if
// non-null) given g = d(loss)/d(raw output).
void backward_raw(Kind kind, const Dims& d, const double* x, double v, const double* g, double* gx, double* gv) {
    const std::size_t n = d.size();
    if (is_geometric(kind)) {
        warp_backward(kind, d, x, v, g, gx, gv);
        return;
    }
    switch (kind) {
        case Kind::Solarize:
            if (gx)
                for (std::size_t i = 0; i < n; ++i) gx[i] += x[i] < v ? g[i] : -g[i];
            break;
        case Kind::Posterize:
        case Kind::Equalize:
            // Integer-native kernels: straight-through to the input pixels.
            if (gx)
                for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
            break;
        case Kind::Contrast: {
            double mu = 0.0, gsum = 0.0;
            for (std::size_t c = 0; c < d.c; ++c) {
                double s = 0.0;
                for (std::size_t p = 0; p < d.plane(); ++p) s += x[c * d.plane() + p];
                mu += luma_weight(d, c) * s;
            }
            mu /= static_cast<double>(d.plane());
            for (std::size_t i = 0; i < n; ++i) gsum += g[i];
            if (gx)
                for (std::size_t c = 0; c < d.c; ++c) {
                    const double shared = (1.0 - v) * luma_weight(d, c) * gsum / static_cast<double>(d.plane());
                    for (std::size_t p = 0; p < d.plane(); ++p) gx[c * d.plane() + p] += v * g[c * d.plane() + p] + shared;
                }
            if (gv)
                for (std::size_t i = 0; i < n; ++i) *gv += g[i] * (x[i] - mu);
            break;
        }
        case Kind::Color:
            for (std::size_t p = 0; p < d.plane(); ++p) {
                double gray = 0.0, gpix = 0.0;
                for (std::size_t c = 0; c < d.c; ++c) {
                    gray += luma_weight(d, c) * x[c * d.plane() + p];
                    gpix += g[c * d.plane() + p];
                }
                for (std::size_t c = 0; c < d.c; ++c) {
                    const std::size_t i = c * d.plane() + p;
                    if (gx) gx[i] += v * g[i] + (1.0 - v) * luma_weight(d, c) * gpix;
                    if (gv) *gv += g[i] * (x[i] - gray);
                }
            }
            break;
        case Kind::Brightness:
            for (std::size_t i = 0; i < n; ++i) {
                if (gx) gx[i] += g[i];
                if (gv) *gv += g[i];
            }
            break;
        case Kind::Sharpness: {
            std::vector<double> blur(n);
            blur3(d, x, blur.data());
            if (gv)
                for (std::size_t i = 0; i < n; ++i) *gv += g[i] * (x[i] - blur[i]);
            if (gx) {
                std::vector<double> scaled(n);
                for (std::size_t i = 0; i < n; ++i) {
                    gx[i] += v * g[i];
                    scaled[i] = (1.0 - v) * g[i];
                }
                blur3_transpose(d, scaled.data(), gx);
            }
            break;
        }
        case Kind::AutoContrast:
            if (!gx) break;
            for (std::size_t c = 0; c < d.c; ++c) {
                const double* p = x + c * d.plane();
                const double* gp = g + c * d.plane();
                double* gxp = gx + c * d.plane();
                const auto [lo_it, hi_it] = std::minmax_element(p, p + d.plane());
                const double lo = *lo_it, hi = *hi_it, range = hi - lo;
                if (!(range > 1e-12)) {
                    for (std::size_t q = 0; q < d.plane(); ++q) gxp[q] += gp[q];
                    continue;
                }
                double glo = 0.0, ghi = 0.0;
                for (std::size_t q = 0; q < d.plane(); ++q) {
                    gxp[q] += gp[q] / range;
                    glo += gp[q] * (p[q] - hi) / (range * range);
                    ghi -= gp[q] * (p[q] - lo) / (range * range);
                }
                gxp[lo_it - p] += glo;
                gxp[hi_it - p] += ghi;
            }
            break;
        case Kind::Invert:
            if (gx)
                for (std::size_t i = 0; i < n; ++i) gx[i] -= g[i];
            break;
        default: throw UsageError("backward_raw: unhandled transform");
    }
}

Dims image_dims(const Shape& s, std::size_t offset) {
    return {s[offset], s[offset + 1], s[offset + 2]};
}

}  // namespace

std::span<const TransformSpec> registry() { return kRegistry; }

const TransformSpec& spec(Kind kind) { return kRegistry[static_cast<std::size_t>(kind)]; }

std::optional<Kind> find(std::string_view name) {
    for (const auto& s : kRegistry)
        if (s.name == name) return s.kind;
    return std::nullopt;
}

double scale_magnitude(const TransformSpec& s, double m01) {
    if (!s.range) throw UsageError(std::string(s.name) + " has no magnitude range");
    return s.range->low + m01 * (s.range->high - s.range->low);
}

Tensor apply_value(const TransformSpec& s, const Tensor& image, double m01) {
    if (image.rank() != 3) throw ShapeError(std::string(s.name) + ": expected [C,H,W] image, got " + to_string(image.shape()));
    const Dims d = image_dims(image.shape(), 0);
    const double v = s.range ? scale_magnitude(s, m01) : 0.0;
    Tensor out(image.shape());
    forward_raw(s.kind, d, image.data(), v, out.data());
    for (double& o : out.values()) o = std::clamp(o, 0.0, 1.0);
    if (!out.all_finite()) throw NumericError(std::string(s.name) + ": non-finite output");
    return out;
}

ad::Var apply(const TransformSpec& s, const ad::Var& x, const ad::Var& m01) {
    const Shape& xs = x.shape();
    const bool batched = xs.size() == 4;
    if (!(xs.size() == 3 || batched)) {
        throw ShapeError(std::string(s.name) + ": expected [C,H,W] or [B,C,H,W], got " + to_string(xs));
    }
    const std::size_t B = batched ? xs[0] : 1;
    if (m01.size() != B) {
        throw ShapeError(std::string(s.name) + ": " + std::to_string(m01.size()) + " magnitudes for " +
                         std::to_string(B) + " images");
    }
    const Dims d = image_dims(xs, batched ? 1 : 0);
    const std::size_t per = d.size();
    const Tensor& xv = x.value();
    const Tensor& mv = m01.value();
    Tensor raw(xs);
    for (std::size_t b = 0; b < B; ++b) {
        const double v = s.range ? scale_magnitude(s, mv[b]) : 0.0;
        forward_raw(s.kind, d, xv.data() + b * per, v, raw.data() + b * per);
    }
    Tensor out(xs);
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = std::clamp(raw[i], 0.0, 1.0);

    const ad::Var parents[] = {x, m01};
    const TransformSpec sp = s;
    return x.tape().record(
        s.name, std::move(out), parents,
        [sp, x, m01, raw = std::move(raw), B, d, per](ad::Tape& t, const Tensor&, const Tensor& g) {
            const Tensor& xv = x.value();
            const Tensor& mv = m01.value();
            Tensor graw(g.shape());
            for (std::size_t i = 0; i < g.size(); ++i) graw[i] = (raw[i] >= 0.0 && raw[i] <= 1.0) ? g[i] : 0.0;
            Tensor* gx = x.requires_grad() ? &t.grad_buffer(x) : nullptr;
            Tensor* gm = (m01.requires_grad() && sp.range) ? &t.grad_buffer(m01) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                const double v = sp.range ? scale_magnitude(sp, mv[b]) : 0.0;
                double gv = 0.0;
                backward_raw(sp.kind, d, xv.data() + b * per, v, graw.data() + b * per,
                             gx ? gx->data() + b * per : nullptr,
                             (gm && sp.magnitude_differentiable) ? &gv : nullptr);
                if (!gm) continue;
                if (sp.magnitude_differentiable) {
                    (*gm)[b] += gv * (sp.range->high - sp.range->low);
                } else {
                    // out + (M - stop_grad(M)): unit gradient per output pixel.
                    double s = 0.0;
                    for (std::size_t i = 0; i < per; ++i) s += g[b * per + i];
                    (*gm)[b] += s;
                }
            }
        });
}

}  // namespace augsearch::transforms
