//! Same-padded, stride-1 cross-correlation over `[batch, X, Y, Z, c]`
//! volumes with kernels laid out `[kx, ky, kz, c_in, c_out]`. A 1D
//! convolution along z is the `kx = ky = 1` case on a `[batch, 1, 1, L, c]`
//! volume.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub extent: [usize; 3],
    pub taps: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvDims {
    fn voxels(&self) -> usize {
        self.batch * self.extent[0] * self.extent[1] * self.extent[2]
    }

    fn voxel(&self, b: usize, x: usize, y: usize, z: usize) -> usize {
        ((b * self.extent[0] + x) * self.extent[1] + y) * self.extent[2] + z
    }

    fn tap(&self, tx: usize, ty: usize, tz: usize) -> usize {
        ((tx * self.taps[1] + ty) * self.taps[2] + tz) * self.cin * self.cout
    }

    pub fn output_len(&self) -> usize {
        self.voxels() * self.cout
    }

    /// Calls `f(out_voxel, in_voxel, kernel_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [nx, ny, nz] = self.extent;
        let [kx, ky, kz] = self.taps;
        let (rx, ry, rz) = (kx / 2, ky / 2, kz / 2);
        for b in 0..self.batch {
            for x in 0..nx {
                for y in 0..ny {
                    for z in 0..nz {
                        let o = self.voxel(b, x, y, z);
                        for tx in 0..kx {
                            let Some(ix) = (x + tx).checked_sub(rx).filter(|&v| v < nx) else {
                                continue;
                            };
                            for ty in 0..ky {
                                let Some(iy) = (y + ty).checked_sub(ry).filter(|&v| v < ny) else {
                                    continue;
                                };
                                for tz in 0..kz {
                                    let Some(iz) = (z + tz).checked_sub(rz).filter(|&v| v < nz)
                                    else {
                                        continue;
                                    };
                                    f(o, self.voxel(b, ix, iy, iz), self.tap(tx, ty, tz));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut out = vec![0.0; d.output_len()];
    for o in 0..d.voxels() {
        out[o * cout..(o + 1) * cout].copy_from_slice(bias);
    }
    d.for_each_tap(|o, i, k| {
        let orow = &mut out[o * cout..(o + 1) * cout];
        for ci in 0..cin {
            let v = input[i * cin + ci];
            if v == 0.0 {
                continue;
            }
            let krow = &kernel[k + ci * cout..k + (ci + 1) * cout];
            for (ov, kv) in orow.iter_mut().zip(krow) {
                *ov += v * kv;
            }
        }
    });
    out
}

pub(crate) fn backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    d: &ConvDims,
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let (cin, cout) = (d.cin, d.cout);
    if let Some(db) = dbias {
        for o in 0..d.voxels() {
            for (g, v) in db.iter_mut().zip(&dout[o * cout..(o + 1) * cout]) {
                *g += v;
            }
        }
    }
    d.for_each_tap(|o, i, k| {
        let g = &dout[o * cout..(o + 1) * cout];
        if g.iter().all(|v| *v == 0.0) {
            return;
        }
        for ci in 0..cin {
            let krow = k + ci * cout..k + (ci + 1) * cout;
            if let Some(dk) = dkernel.as_deref_mut() {
                let v = input[i * cin + ci];
                if v != 0.0 {
                    for (dkv, gv) in dk[krow.clone()].iter_mut().zip(g) {
                        *dkv += v * gv;
                    }
                }
            }
            if let Some(di) = dinput.as_deref_mut() {
                let mut s = 0.0;
                for (kv, gv) in kernel[krow].iter().zip(g) {
                    s += kv * gv;
                }
                di[i * cin + ci] += s;
            }
        }
    });
}
