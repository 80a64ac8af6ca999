//! Derivative-free minimisation (Nelder–Mead simplex).

use nalgebra::DVector;

use crate::scalar::Real;

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions<T> {
    /// Edge length of the initial simplex.
    pub step: T,
    pub max_evals: usize,
    /// Stop as soon as the objective falls to or below this value.
    pub target: T,
    /// Stop when the simplex diameter falls below this value.
    pub xtol: T,
}

#[derive(Debug, Clone)]
pub struct Minimum<T: Real> {
    pub x: DVector<T>,
    pub value: T,
    pub evals: usize,
}

/// Minimises `f` from `start`. Works on discontinuous objectives (the simplex
/// only compares function values), which is what the rank-based score needs.
pub fn nelder_mead<T: Real, F>(f: &mut F, start: &DVector<T>, opts: &NelderMeadOptions<T>) -> Minimum<T>
where
    F: FnMut(&DVector<T>) -> T + ?Sized,
{
    let dim = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &DVector<T>, evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite_value() {
            v
        } else {
            T::max_value().unwrap_or(T::of(f64::MAX))
        }
    };

    if dim == 0 {
        let value = eval(start, &mut evals);
        return Minimum { x: start.clone(), value, evals };
    }

    let mut simplex: Vec<DVector<T>> = Vec::with_capacity(dim + 1);
    simplex.push(start.clone());
    for k in 0..dim {
        let mut v = start.clone();
        v[k] += opts.step;
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|x| eval(x, &mut evals)).collect();

    let half = T::of(0.5);
    let two = T::of(2.0);
    loop {
        // order best .. worst
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();

        if values[0] <= opts.target || evals >= opts.max_evals {
            break;
        }
        let diameter = simplex[1..]
            .iter()
            .map(|v| (v - &simplex[0]).amax())
            .fold(T::zero(), |a, b| if b > a { b } else { a });
        if diameter <= opts.xtol {
            break;
        }

        let centroid = simplex[..dim].iter().fold(DVector::zeros(dim), |acc, v| acc + v) / T::of_usize(dim);
        let worst = simplex[dim].clone();
        let reflected = &centroid + (&centroid - &worst);
        let fr = eval(&reflected, &mut evals);

        if fr < values[0] {
            let expanded = &centroid + (&reflected - &centroid) * two;
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let c = &centroid + (&reflected - &centroid) * half;
            let fc = eval(&c, &mut evals);
            (c, fc)
        } else {
            let c = &centroid + (&worst - &centroid) * half;
            let fc = eval(&c, &mut evals);
            (c, fc)
        };
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        // shrink toward the best vertex
        let best = simplex[0].clone();
        for k in 1..=dim {
            simplex[k] = &best + (&simplex[k] - &best) * half;
            values[k] = eval(&simplex[k], &mut evals);
        }
    }
    Minimum { x: simplex[0].clone(), value: values[0], evals }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> NelderMeadOptions<f64> {
        NelderMeadOptions { step: 0.5, max_evals: 5000, target: 0.0, xtol: 1e-10 }
    }

    #[test]
    fn rosenbrock() {
        let mut f = |x: &DVector<f64>| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(&mut f, &DVector::from_vec(vec![-1.2, 1.0]), &opts());
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn step_function_in_one_dimension() {
        // |floor(10 x) - 3| is minimised on [0.3, 0.4)
        let mut f = |x: &DVector<f64>| ((x[0] * 10.0).floor() - 3.0).abs();
        let m = nelder_mead(&mut f, &DVector::from_vec(vec![0.0]), &opts());
        assert_eq!(m.value, 0.0);
        assert!(m.x[0] >= 0.3 && m.x[0] < 0.4);
    }

    #[test]
    fn respects_eval_budget_and_target() {
        let mut calls = 0;
        let mut f = |x: &DVector<f64>| {
            calls += 1;
            x.norm_squared()
        };
        let o = NelderMeadOptions { max_evals: 20, ..opts() };
        let m = nelder_mead(&mut f, &DVector::from_vec(vec![3.0, -2.0, 1.0]), &o);
        assert!(m.evals <= 20 + 3);
        let mut g = |x: &DVector<f64>| x.norm_squared();
        let o = NelderMeadOptions { target: 1.0, ..opts() };
        let m = nelder_mead(&mut g, &DVector::from_vec(vec![3.0, -2.0]), &o);
        assert!(m.value <= 1.0);
    }
}
