/// Correctly rounded floating-point summation (Shewchuk's partials with
/// round-half-even correction). The result does not depend on the order of
/// the inputs, which makes segment sums exactly permutation-invariant.
#[derive(Debug, Default, Clone)]
pub struct ExactSum {
    partials: Vec<f64>,
    // Set once a non-finite value is seen; the plain sum is reported then.
    naive: f64,
    non_finite: bool,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.partials.clear();
        self.naive = 0.0;
        self.non_finite = false;
    }

    pub fn add(&mut self, mut x: f64) {
        self.naive += x;
        if !x.is_finite() {
            self.non_finite = true;
            return;
        }
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        if self.non_finite || !self.naive.is_finite() {
            return self.naive;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            let y = p[n - 1];
            n -= 1;
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = ExactSum::new();
    values.into_iter().for_each(|v| acc.add(v));
    acc.value()
}
