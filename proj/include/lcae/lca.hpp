#pragma once

#include <cmath>
#include <string>

#include "lcae/core.hpp"

namespace lcae::lca {

/// Prior-knowledge triple parameterizing the fixed contrast operators:
/// center weight, paired-neighbor weight, and the pixel offset between
/// center and neighbors.
struct LcaParams {
  double alpha = 1.0;
  double beta = 0.5;
  int dilation = 1;

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0))
      throw ConfigError("lca: alpha and beta must be positive");
    if (dilation < 1) throw ConfigError("lca: dilation must be >= 1");
  }
};

/// The four directional local-contrast-distance maps, all H×W.
template <class Scalar>
struct LcdMaps {
  Plane<Scalar> diag_down;  // neighbors at (-d,-d) and (+d,+d)
  Plane<Scalar> diag_up;    // neighbors at (-d,+d) and (+d,-d)
  Plane<Scalar> horizontal; // neighbors at (0,-d) and (0,+d)
  Plane<Scalar> vertical;   // neighbors at (-d,0) and (+d,0)
};

namespace detail {

template <class Scalar>
void check_image(const Image<Scalar>& image, const LcaParams& p) {
  p.validate();
  const Index footprint = 2 * static_cast<Index>(p.dilation) + 1;
  if (image.rows() < footprint || image.cols() < footprint)
    throw DimensionError("lca: image " + std::to_string(image.rows()) + "x" +
                         std::to_string(image.cols()) + " smaller than operator footprint " +
                         std::to_string(footprint) + "x" + std::to_string(footprint));
  if (!all_finite(image)) throw InputError("lca: image contains non-finite pixels");
}

/// Same-size correlation with zero padding outside the image.
template <class Scalar>
Plane<Scalar> correlate_same(const Image<Scalar>& image, const Plane<Scalar>& op) {
  const Index h = image.rows(), w = image.cols();
  const Index r = op.rows() / 2;
  Plane<Scalar> out(h, w);
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      Scalar acc = 0;
      for (Index ky = -r; ky <= r; ++ky) {
        const Index sy = y + ky;
        if (sy < 0 || sy >= h) continue;
        for (Index kx = -r; kx <= r; ++kx) {
          const Index sx = x + kx;
          if (sx < 0 || sx >= w) continue;
          acc += op(ky + r, kx + r) * image(sy, sx);
        }
      }
      out(y, x) = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Dense (2d+1)×(2d+1) operator for one direction: alpha at the center,
/// -beta at the two opposed neighbors, zero elsewhere. Directions are indexed
/// 0..3 in the LcdMaps field order.
template <class Scalar>
Plane<Scalar> make_operator(const LcaParams& p, int direction) {
  p.validate();
  const int d = p.dilation;
  const Index l = 2 * d + 1;
  Plane<Scalar> op = Plane<Scalar>::Zero(l, l);
  op(d, d) = static_cast<Scalar>(p.alpha);
  const Scalar nb = static_cast<Scalar>(-p.beta);
  switch (direction) {
    case 0: op(0, 0) = nb; op(l - 1, l - 1) = nb; break;
    case 1: op(0, l - 1) = nb; op(l - 1, 0) = nb; break;
    case 2: op(d, 0) = nb; op(d, l - 1) = nb; break;
    case 3: op(0, d) = nb; op(l - 1, d) = nb; break;
    default: throw ConfigError("lca: direction must be 0..3");
  }
  return op;
}

/// Runs the four fixed operators over the image as full dense correlations
/// (zero padded, output H×W).
template <class Scalar>
LcdMaps<Scalar> lcd_maps(const Image<Scalar>& image, const LcaParams& p) {
  detail::check_image(image, p);
  LcdMaps<Scalar> maps;
  maps.diag_down = detail::correlate_same(image, make_operator<Scalar>(p, 0));
  maps.diag_up = detail::correlate_same(image, make_operator<Scalar>(p, 1));
  maps.horizontal = detail::correlate_same(image, make_operator<Scalar>(p, 2));
  maps.vertical = detail::correlate_same(image, make_operator<Scalar>(p, 3));
  return maps;
}

/// Attention weights: sigmoid of the paired directional products,
/// diagonal·anti-diagonal + horizontal·vertical. Entries lie in (0,1);
/// flat regions land on 0.5 when alpha = 2·beta.
template <class Scalar>
Plane<Scalar> lca_weights(const LcdMaps<Scalar>& maps) {
  const Index h = maps.diag_down.rows(), w = maps.diag_down.cols();
  auto same = [&](const Plane<Scalar>& m) { return m.rows() == h && m.cols() == w; };
  if (!same(maps.diag_up) || !same(maps.horizontal) || !same(maps.vertical))
    throw DimensionError("lca: LCD maps are not co-registered");
  Plane<Scalar> out(h, w);
  out.array() = maps.diag_down.array() * maps.diag_up.array() +
                maps.horizontal.array() * maps.vertical.array();
  out.array() = Scalar(1) / (Scalar(1) + (-out.array()).exp());
  return out;
}

template <class Scalar>
Plane<Scalar> lca_map(const Image<Scalar>& image, const LcaParams& p) {
  return lca_weights(lcd_maps(image, p));
}

/// Reference path: evaluates the closed-form per-pixel expressions with plain
/// nested loops and no convolution machinery. Shares no code with
/// lcd_maps/lca_weights; the two routes check each other.
template <class Scalar>
Plane<Scalar> lca_oracle(const Image<Scalar>& image, const LcaParams& p) {
  detail::check_image(image, p);
  const Index h = image.rows(), w = image.cols();
  const Index d = p.dilation;
  const auto alpha = static_cast<Scalar>(p.alpha);
  const auto beta = static_cast<Scalar>(p.beta);
  auto px = [&](Index y, Index x) -> Scalar {
    return (y < 0 || y >= h || x < 0 || x >= w) ? Scalar(0) : image(y, x);
  };
  Plane<Scalar> out(h, w);
  for (Index m = 0; m < h; ++m) {
    for (Index n = 0; n < w; ++n) {
      const Scalar c = alpha * image(m, n);
      const Scalar f1 = c - beta * (px(m - d, n - d) + px(m + d, n + d));
      const Scalar f2 = c - beta * (px(m - d, n + d) + px(m + d, n - d));
      const Scalar f3 = c - beta * (px(m, n - d) + px(m, n + d));
      const Scalar f4 = c - beta * (px(m - d, n) + px(m + d, n));
      const Scalar s = f1 * f2 + f3 * f4;
      out(m, n) = Scalar(1) / (Scalar(1) + std::exp(-s));
    }
  }
  return out;
}

}  // namespace lcae::lca
