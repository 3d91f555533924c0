/// Seeded 3D value noise: random lattice values blended with a quintic fade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueNoise {
    pub seed: u64,
    pub octaves: usize,
    /// Lattice cells per meter at the first octave.
    pub frequency: f64,
    /// Amplitude ratio between successive octaves.
    pub persistence: f64,
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl ValueNoise {
    fn lattice(&self, octave: usize, x: i64, y: i64, z: i64) -> f64 {
        let mut h = mix(self.seed ^ (octave as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for c in [x, y, z] {
            h = mix(h ^ c as u64);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn single(&self, octave: usize, p: [f64; 3]) -> f64 {
        let cell = p.map(|v| v.floor());
        let f = [0, 1, 2].map(|i| fade(p[i] - cell[i]));
        let c = cell.map(|v| v as i64);
        let mut acc = 0.0;
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let w: f64 = (0..3)
                .map(|i| if o[i] == 1 { f[i] } else { 1.0 - f[i] })
                .product();
            acc += w * self.lattice(octave, c[0] + o[0] as i64, c[1] + o[1] as i64, c[2] + o[2] as i64);
        }
        acc
    }

    /// Fractal sum normalized to `[0, 1]`.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let (mut amp, mut freq, mut total, mut norm) = (1.0, self.frequency, 0.0, 0.0);
        for o in 0..self.octaves.max(1) {
            total += amp * self.single(o, p.map(|v| v * freq));
            norm += amp;
            amp *= self.persistence;
            freq *= 2.0;
        }
        total / norm
    }
}
