//! Dense multi-channel fields on uniform grids and the three convolution
//! primitives (plain, strided, transposed) with zero padding, in 2D and 3D.
//!
//! Zero padding implements homogeneous Dirichlet boundaries: fields store
//! interior nodes only and out-of-range entries are treated as zero.

use crate::error::{Error, Result};

/// A multi-channel d-dimensional array of node values on a uniform grid.
///
/// Layout is channel-major with the last axis fastest, e.g. in 2D the value
/// at channel `c`, row `j`, column `i` lives at `(c*ny + j)*nx + i` with
/// `extent = [ny, nx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub channels: usize,
    pub extent: Vec<usize>,
    pub data: Vec<f64>,
}

/// A coefficient tensor `K[l,k,j,i]` representing a discretized linear
/// operator as a centered convolution. Tap counts are odd along every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub taps: Vec<usize>,
    pub data: Vec<f64>,
}

impl GridField {
    pub fn zeros(channels: usize, extent: &[usize]) -> Self {
        let n: usize = extent.iter().product();
        GridField {
            channels,
            extent: extent.to_vec(),
            data: vec![0.0; channels * n],
        }
    }

    pub fn from_vec(channels: usize, extent: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = extent.iter().product();
        if data.len() != channels * n {
            return Err(Error::ShapeMismatch(format!(
                "field data length {} != channels {} x extent {:?}",
                data.len(),
                channels,
                extent
            )));
        }
        Ok(GridField {
            channels,
            extent: extent.to_vec(),
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.extent.len()
    }

    /// Nodes per channel.
    pub fn len_per_channel(&self) -> usize {
        self.extent.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Extract one channel as a single-channel field.
    pub fn channel_field(&self, c: usize) -> GridField {
        GridField {
            channels: 1,
            extent: self.extent.clone(),
            data: self.channel(c).to_vec(),
        }
    }

    /// Stack single-channel fields of identical extent into one field.
    pub fn concat_channels(parts: &[&GridField]) -> Result<GridField> {
        let extent = parts[0].extent.clone();
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.extent != extent {
                return Err(Error::ShapeMismatch("concat extents differ".into()));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(GridField {
            channels,
            extent,
            data,
        })
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &GridField) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, c: f64) -> GridField {
        let mut out = self.clone();
        for x in &mut out.data {
            *x *= c;
        }
        out
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &GridField) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &GridField) -> GridField {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
        out
    }

    pub fn add(&self, other: &GridField) -> GridField {
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl StencilKernel {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        taps: &[usize],
        data: Vec<f64>,
    ) -> Result<Self> {
        if taps.iter().any(|t| t % 2 == 0 || *t == 0) {
            return Err(Error::InvalidArgument(format!(
                "tap counts must be odd and positive, got {:?}",
                taps
            )));
        }
        let n: usize = taps.iter().product();
        if data.len() != out_channels * in_channels * n {
            return Err(Error::ShapeMismatch(format!(
                "kernel data length {} != {}x{}x{:?}",
                data.len(),
                out_channels,
                in_channels,
                taps
            )));
        }
        Ok(StencilKernel {
            out_channels,
            in_channels,
            taps: taps.to_vec(),
            data,
        })
    }

    /// Single-channel kernel from row-major 2D coefficients (y outer, x inner).
    pub fn from_2d(rows: &[&[f64]]) -> Self {
        let ty = rows.len();
        let tx = rows[0].len();
        let mut data = Vec::with_capacity(ty * tx);
        for r in rows {
            assert_eq!(r.len(), tx);
            data.extend_from_slice(r);
        }
        StencilKernel::new(1, 1, &[ty, tx], data).unwrap()
    }

    /// Identity kernel: a single unit tap.
    pub fn delta(dim: usize) -> Self {
        StencilKernel::new(1, 1, &vec![1; dim], vec![1.0]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.taps.len()
    }

    pub fn taps_per_pair(&self) -> usize {
        self.taps.iter().product()
    }

    /// Center coefficient of a single-channel kernel.
    pub fn center(&self) -> f64 {
        debug_assert_eq!(self.out_channels * self.in_channels, 1);
        let mut idx = 0;
        for &t in &self.taps {
            idx = idx * t + t / 2;
        }
        self.data[idx]
    }

    /// Kernel with every axis index negated (per channel pair).
    pub fn flipped(&self) -> StencilKernel {
        let n = self.taps_per_pair();
        let mut out = self.clone();
        for p in 0..self.out_channels * self.in_channels {
            let src = &self.data[p * n..(p + 1) * n];
            let dst = &mut out.data[p * n..(p + 1) * n];
            for (a, b) in dst.iter_mut().zip(src.iter().rev()) {
                *a = *b;
            }
        }
        out
    }

    /// Adjoint kernel: channels transposed and axes flipped, so that
    /// `conv(K, .)` and `conv(K.adjoint(), .)` are transposes of each other.
    pub fn adjoint(&self) -> StencilKernel {
        let n = self.taps_per_pair();
        let mut data = vec![0.0; self.data.len()];
        for l in 0..self.out_channels {
            for k in 0..self.in_channels {
                let src = &self.data[(l * self.in_channels + k) * n..][..n];
                let dst = &mut data[(k * self.out_channels + l) * n..][..n];
                for (a, b) in dst.iter_mut().zip(src.iter().rev()) {
                    *a = *b;
                }
            }
        }
        StencilKernel {
            out_channels: self.in_channels,
            in_channels: self.out_channels,
            taps: self.taps.clone(),
            data,
        }
    }

    pub fn scaled(&self, c: f64) -> StencilKernel {
        let mut out = self.clone();
        for x in &mut out.data {
            *x *= c;
        }
        out
    }

    /// Sum of all coefficients (single channel pair).
    pub fn weight_sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Plain-text rendering of a single-channel kernel, row-major with six
    /// significant digits.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let n = self.taps_per_pair();
        for p in 0..self.out_channels * self.in_channels {
            if self.out_channels * self.in_channels > 1 {
                s.push_str(&format!("# channel pair {}\n", p));
            }
            let coeffs = &self.data[p * n..(p + 1) * n];
            match self.taps.len() {
                2 => render_2d(&mut s, coeffs, self.taps[0], self.taps[1]),
                3 => {
                    for k in 0..self.taps[0] {
                        s.push_str(&format!("# slice {}\n", k as i64 - (self.taps[0] / 2) as i64));
                        let plane = self.taps[1] * self.taps[2];
                        render_2d(&mut s, &coeffs[k * plane..(k + 1) * plane], self.taps[1], self.taps[2]);
                    }
                }
                _ => {
                    for row in coeffs.chunks(self.taps[self.taps.len() - 1]) {
                        render_row(&mut s, row);
                    }
                }
            }
        }
        s
    }
}

fn render_row(s: &mut String, row: &[f64]) {
    let parts: Vec<String> = row.iter().map(|x| format!("{:.6}", x)).collect();
    s.push_str(&parts.join(" "));
    s.push('\n');
}

fn render_2d(s: &mut String, coeffs: &[f64], ny: usize, nx: usize) {
    for j in 0..ny {
        render_row(s, &coeffs[j * nx..(j + 1) * nx]);
    }
}

fn check_compatible(k: &StencilKernel, v: &GridField) -> Result<()> {
    if k.in_channels != v.channels {
        return Err(Error::ShapeMismatch(format!(
            "kernel in_channels {} != field channels {}",
            k.in_channels, v.channels
        )));
    }
    if k.dim() != v.dim() {
        return Err(Error::ShapeMismatch(format!(
            "kernel dim {} != field dim {}",
            k.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// `(K ⋆ v)[l,j,i] = Σ_k Σ_{ȷ,ı} K[l,k,ȷ,ı] v[k,j+ȷ,i+ı]`, out-of-range
/// entries of `v` treated as zero. Output has the same extent as `v`.
pub fn conv(k: &StencilKernel, v: &GridField) -> Result<GridField> {
    check_compatible(k, v)?;
    match v.dim() {
        2 => Ok(conv2d(k, v)),
        3 => Ok(conv3d(k, v)),
        d => Err(Error::InvalidArgument(format!("unsupported dimension {}", d))),
    }
}

fn conv2d(k: &StencilKernel, v: &GridField) -> GridField {
    let (ny, nx) = (v.extent[0], v.extent[1]);
    let (ty, tx) = (k.taps[0], k.taps[1]);
    let (ry, rx) = ((ty / 2) as i64, (tx / 2) as i64);
    let npc = ny * nx;
    let ktaps = ty * tx;
    let mut out = GridField::zeros(k.out_channels, &v.extent);
    for l in 0..k.out_channels {
        let odata = &mut out.data[l * npc..(l + 1) * npc];
        for kc in 0..k.in_channels {
            let kcoef = &k.data[(l * k.in_channels + kc) * ktaps..][..ktaps];
            let vdata = &v.data[kc * npc..(kc + 1) * npc];
            for j in 0..ny as i64 {
                let row = &mut odata[(j as usize) * nx..(j as usize + 1) * nx];
                for dj in -ry..=ry {
                    let sj = j + dj;
                    if sj < 0 || sj >= ny as i64 {
                        continue;
                    }
                    let krow = &kcoef[((dj + ry) as usize) * tx..][..tx];
                    let vrow = &vdata[(sj as usize) * nx..(sj as usize + 1) * nx];
                    for (di_idx, &kv) in krow.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let di = di_idx as i64 - rx;
                        // overlap of [0,nx) with [0-di, nx-di)
                        let lo = (-di).max(0) as usize;
                        let hi = ((nx as i64 - di).min(nx as i64)) as usize;
                        for i in lo..hi {
                            row[i] += kv * vrow[(i as i64 + di) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d(k: &StencilKernel, v: &GridField) -> GridField {
    let (nz, ny, nx) = (v.extent[0], v.extent[1], v.extent[2]);
    let (tz, ty, tx) = (k.taps[0], k.taps[1], k.taps[2]);
    let (rz, ry, rx) = ((tz / 2) as i64, (ty / 2) as i64, (tx / 2) as i64);
    let npc = nz * ny * nx;
    let ktaps = tz * ty * tx;
    let mut out = GridField::zeros(k.out_channels, &v.extent);
    for l in 0..k.out_channels {
        for kc in 0..k.in_channels {
            let kcoef = &k.data[(l * k.in_channels + kc) * ktaps..][..ktaps];
            let vdata = &v.data[kc * npc..(kc + 1) * npc];
            let odata = &mut out.data[l * npc..(l + 1) * npc];
            for kk in 0..nz as i64 {
                for j in 0..ny as i64 {
                    let obase = (kk as usize * ny + j as usize) * nx;
                    for dk in -rz..=rz {
                        let sk = kk + dk;
                        if sk < 0 || sk >= nz as i64 {
                            continue;
                        }
                        for dj in -ry..=ry {
                            let sj = j + dj;
                            if sj < 0 || sj >= ny as i64 {
                                continue;
                            }
                            let kbase = (((dk + rz) as usize) * ty + (dj + ry) as usize) * tx;
                            let vbase = (sk as usize * ny + sj as usize) * nx;
                            for di_idx in 0..tx {
                                let kv = kcoef[kbase + di_idx];
                                if kv == 0.0 {
                                    continue;
                                }
                                let di = di_idx as i64 - rx;
                                let lo = (-di).max(0) as usize;
                                let hi = ((nx as i64 - di).min(nx as i64)) as usize;
                                for i in lo..hi {
                                    odata[obase + i] += kv * vdata[vbase + (i as i64 + di) as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strided convolution: `(K ⋆_s v)[l,j,i] = Σ K[l,k,ȷ,ı] v[k, j·s+ȷ, i·s+ı]`.
/// Output extent per axis is `ceil(extent/stride)`.
pub fn conv_strided(k: &StencilKernel, v: &GridField, stride: &[usize]) -> Result<GridField> {
    check_compatible(k, v)?;
    if stride.len() != v.dim() || stride.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!(
            "stride {:?} invalid for dimension {}",
            stride,
            v.dim()
        )));
    }
    let out_extent: Vec<usize> = v
        .extent
        .iter()
        .zip(stride)
        .map(|(&n, &s)| n.div_ceil(s))
        .collect();
    Ok(strided_with_anchor(k, v, stride, 0, &out_extent))
}

/// Vertex-centered restriction: coarse node `j` sits at fine index `2j+1`,
/// so output extent is `(n-1)/2` for odd `n`.
pub fn restrict_vc(k: &StencilKernel, v: &GridField) -> Result<GridField> {
    check_compatible(k, v)?;
    for &n in &v.extent {
        if n % 2 == 0 || n < 3 {
            return Err(Error::ShapeMismatch(format!(
                "vertex-centered restriction needs odd extents >= 3, got {:?}",
                v.extent
            )));
        }
    }
    let out_extent: Vec<usize> = v.extent.iter().map(|&n| (n - 1) / 2).collect();
    let stride = vec![2usize; v.dim()];
    Ok(strided_with_anchor(k, v, &stride, 1, &out_extent))
}

/// Shared kernel for strided sampling: output index j reads fine index
/// `j*stride + anchor + tap_offset`.
fn strided_with_anchor(
    k: &StencilKernel,
    v: &GridField,
    stride: &[usize],
    anchor: i64,
    out_extent: &[usize],
) -> GridField {
    let d = v.dim();
    let npc_in = v.len_per_channel();
    let npc_out: usize = out_extent.iter().product();
    let ktaps = k.taps_per_pair();
    let radius: Vec<i64> = k.taps.iter().map(|&t| (t / 2) as i64).collect();
    let mut out = GridField::zeros(k.out_channels, out_extent);

    // generic multi-index walk, d is 2 or 3
    let mut oidx = vec![0usize; d];
    for l in 0..k.out_channels {
        for flat in 0..npc_out {
            // decode flat -> oidx
            let mut rem = flat;
            for ax in (0..d).rev() {
                oidx[ax] = rem % out_extent[ax];
                rem /= out_extent[ax];
            }
            let mut acc = 0.0;
            for kc in 0..k.in_channels {
                let kcoef = &k.data[(l * k.in_channels + kc) * ktaps..][..ktaps];
                let vdata = &v.data[kc * npc_in..(kc + 1) * npc_in];
                let mut tap = vec![0i64; d];
                'taps: for (t, &kv) in kcoef.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let mut rem = t;
                    for ax in (0..d).rev() {
                        tap[ax] = (rem % k.taps[ax]) as i64 - radius[ax];
                        rem /= k.taps[ax];
                    }
                    let mut vflat = 0usize;
                    for ax in 0..d {
                        let s = oidx[ax] as i64 * stride[ax] as i64 + anchor + tap[ax];
                        if s < 0 || s >= v.extent[ax] as i64 {
                            continue 'taps;
                        }
                        vflat = vflat * v.extent[ax] + s as usize;
                    }
                    acc += kv * vdata[vflat];
                }
            }
            out.data[l * npc_out + flat] += acc;
        }
    }
    out
}

/// Insert `stride-1` zeros between samples: `out[s*j] = v[j]`, output extent
/// `stride * extent`.
pub fn upsample(v: &GridField, stride: &[usize]) -> GridField {
    let out_extent: Vec<usize> = v.extent.iter().zip(stride).map(|(&n, &s)| n * s).collect();
    scatter_upsample(v, stride, 0, &out_extent)
}

/// Vertex-centered zero insertion: coarse node `j` lands on fine index
/// `2j+1`, output extent `2n+1`.
pub fn upsample_vc(v: &GridField) -> GridField {
    let out_extent: Vec<usize> = v.extent.iter().map(|&n| 2 * n + 1).collect();
    let stride = vec![2usize; v.dim()];
    scatter_upsample(v, &stride, 1, &out_extent)
}

fn scatter_upsample(v: &GridField, stride: &[usize], anchor: usize, out_extent: &[usize]) -> GridField {
    let d = v.dim();
    let npc_in = v.len_per_channel();
    let npc_out: usize = out_extent.iter().product();
    let mut out = GridField::zeros(v.channels, out_extent);
    let mut idx = vec![0usize; d];
    for c in 0..v.channels {
        for flat in 0..npc_in {
            let mut rem = flat;
            for ax in (0..d).rev() {
                idx[ax] = rem % v.extent[ax];
                rem /= v.extent[ax];
            }
            let mut oflat = 0usize;
            for ax in 0..d {
                oflat = oflat * out_extent[ax] + idx[ax] * stride[ax] + anchor;
            }
            out.data[c * npc_out + oflat] = v.data[c * npc_in + flat];
        }
    }
    out
}

/// Deconvolution (transposed convolution): `K ⋆^s v = K ⋆ (v ↑ s)` where the
/// upsampling inserts zeros. Output extent is `stride × extent`.
pub fn deconv(k: &StencilKernel, v: &GridField, stride: &[usize]) -> Result<GridField> {
    check_compatible(k, v)?;
    conv(k, &upsample(v, stride))
}

/// Vertex-centered prolongation: zero-insert onto the fine grid (extent
/// `2n+1`) and convolve. Adjoint of [`restrict_vc`] for symmetric kernels.
pub fn prolong_vc(k: &StencilKernel, v: &GridField) -> Result<GridField> {
    check_compatible(k, v)?;
    conv(k, &upsample_vc(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace5() -> StencilKernel {
        StencilKernel::from_2d(&[&[0.0, 1.0, 0.0], &[1.0, -4.0, 1.0], &[0.0, 1.0, 0.0]])
    }

    #[test]
    fn conv_identity() {
        let v = GridField::from_vec(1, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let k = StencilKernel::delta(2);
        assert_eq!(conv(&k, &v).unwrap(), v);
    }

    #[test]
    fn conv_laplacian_ones_2x2() {
        // each node: -4 + two in-range neighbors = -2
        let v = GridField::from_vec(1, &[2, 2], vec![1.0; 4]).unwrap();
        let out = conv(&laplace5(), &v).unwrap();
        assert_eq!(out.data, vec![-2.0; 4]);
    }

    #[test]
    fn conv_laplacian_delta_3x3() {
        let mut v = GridField::zeros(1, &[3, 3]);
        v.data[4] = 1.0;
        let out = conv(&laplace5(), &v).unwrap();
        assert_eq!(
            out.data,
            vec![0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn conv_channel_mismatch_errors() {
        let v = GridField::zeros(2, &[3, 3]);
        assert!(conv(&laplace5(), &v).is_err());
    }

    #[test]
    fn strided_delta_subsamples() {
        let v = GridField::from_vec(1, &[4, 4], (0..16).map(|x| x as f64).collect()).unwrap();
        let k = StencilKernel::delta(2);
        let out = conv_strided(&k, &v, &[2, 2]).unwrap();
        assert_eq!(out.extent, vec![2, 2]);
        assert_eq!(out.data, vec![0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn stride_one_matches_conv() {
        let v = GridField::from_vec(1, &[3, 3], (0..9).map(|x| x as f64).collect()).unwrap();
        let k = laplace5();
        let a = conv(&k, &v).unwrap();
        let b = conv_strided(&k, &v, &[1, 1]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deconv_delta_zero_insertion() {
        let v = GridField::from_vec(1, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = StencilKernel::delta(2);
        let out = deconv(&k, &v, &[2, 2]).unwrap();
        assert_eq!(out.extent, vec![4, 4]);
        let expect = vec![
            1.0, 0.0, 2.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            3.0, 0.0, 4.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(out.data, expect);
    }

    #[test]
    fn deconv_equals_conv_of_upsample() {
        let k = laplace5();
        let v = GridField::from_vec(1, &[3, 3], (0..9).map(|x| (x * x) as f64).collect()).unwrap();
        let a = deconv(&k, &v, &[2, 2]).unwrap();
        let b = conv(&k, &upsample(&v, &[2, 2])).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn flipped_and_adjoint() {
        let k = StencilKernel::from_2d(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let f = k.flipped();
        assert_eq!(f.data, vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
        assert_eq!(k.adjoint().data, f.data);
    }

    #[test]
    fn conv3d_matches_hand_sum() {
        // 3-point 1D laplacian along z only
        let k = StencilKernel::new(1, 1, &[3, 1, 1], vec![1.0, -2.0, 1.0]).unwrap();
        let v = GridField::from_vec(1, &[3, 1, 1], vec![1.0, 2.0, 4.0]).unwrap();
        let out = conv(&k, &v).unwrap();
        // node 0: -2*1 + 2 = 0; node 1: 1 - 4 + 4 = 1; node 2: 2 - 8 = -6
        assert_eq!(out.data, vec![0.0, 1.0, -6.0]);
    }

    #[test]
    fn restrict_prolong_adjoint_vc() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let p = crate::discretize::transfer_stencils(2).unwrap().0;
        let fine: Vec<f64> = (0..7 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let coarse: Vec<f64> = (0..3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u = GridField::from_vec(1, &[7, 7], fine).unwrap();
        let v = GridField::from_vec(1, &[3, 3], coarse).unwrap();
        let lhs = restrict_vc(&p, &u).unwrap().dot(&v);
        let rhs = u.dot(&prolong_vc(&p, &v).unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }
}
