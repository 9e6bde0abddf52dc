//! Scalar reference evaluation of the directional filter: every propagated
//! sample and every trilinear corner is visited explicitly.

use evdeblur::def::DefParams;
use evdeblur::{FlowField, Image, StackedEventFrames};

fn voxel(vol: &StackedEventFrames, c: i64, x: i64, y: i64) -> f64 {
    let (w, h, n) = (vol.width() as i64, vol.height() as i64, vol.channels() as i64);
    if c < 0 || c >= n || x < 0 || x >= w || y < 0 || y >= h {
        0.0
    } else {
        vol.at(c as usize, x as usize, y as usize)
    }
}

fn lerp3(vol: &StackedEventFrames, x: f64, y: f64, c: f64) -> f64 {
    let (x0, y0, c0) = (x.floor(), y.floor(), c.floor());
    let mut acc = 0.0;
    for (dc, wc) in [(0, 1.0 - (c - c0)), (1, c - c0)] {
        for (dy, wy) in [(0, 1.0 - (y - y0)), (1, y - y0)] {
            for (dx, wx) in [(0, 1.0 - (x - x0)), (1, x - x0)] {
                let v = voxel(vol, c0 as i64 + dc, x0 as i64 + dx, y0 as i64 + dy);
                acc += wc * wy * wx * v;
            }
        }
    }
    acc
}

pub fn nadaraya_watson(flow: &FlowField, shift: f64, x: usize, y: usize, sigma: f64, window: usize) -> [f64; 2] {
    let half = window as f64 / 2.0;
    let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
    for qy in 0..flow.height() {
        for qx in 0..flow.width() {
            let f = flow.at(qx, qy);
            let ox = qx as f64 + shift * f[0] - x as f64;
            let oy = qy as f64 + shift * f[1] - y as f64;
            if ox.abs() > half || oy.abs() > half {
                continue;
            }
            let wgt = (-(ox * ox + oy * oy) / (2.0 * sigma * sigma)).exp();
            sw += wgt;
            su += wgt * f[0];
            sv += wgt * f[1];
        }
    }
    if sw < 1e-12 {
        flow.at(x, y)
    } else {
        [su / sw, sv / sw]
    }
}

pub fn directional_filter(vol: &StackedEventFrames, flow: &FlowField, p: &DefParams, interval: (f64, f64), first: usize) -> Image {
    let (a, b) = interval;
    let chunk = (b - a) / vol.chunks_per_interval() as f64;
    Image::from_fn(vol.width(), vol.height(), |x, y| {
        let px = y * vol.width() + x;
        let c = p.center.at(x, y).clamp(a, b);
        let d = nadaraya_watson(flow, c - a, x, y, p.bandwidth, p.window);
        let ch0 = first as f64 + (c - a) / chunk - 0.5;
        let k = p.k as isize;
        let mut g = 0.0;
        for j in -k..=k {
            let s = p.stride * j as f64;
            g += p.alpha_at(j, px) * lerp3(vol, x as f64 + s * d[0], y as f64 + s * d[1], ch0 + s);
        }
        g
    })
}
