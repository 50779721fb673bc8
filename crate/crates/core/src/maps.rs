//! Class activation maps from patch tokens, coupled with the inner-guided
//! attention map.

use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{ops, Tape, Tensor, Var};

/// Per-image maps produced for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMaps {
    /// `D x h x w` reshaped patch tokens.
    pub f: Tensor,
    /// `c x h x w` analogous class activation maps.
    pub f_prime: Tensor,
    /// `c x h x w`, `f_prime` times the inner-guided map.
    pub m_hat: Tensor,
    /// `h x w`, channel `label_used` of `m_hat`.
    pub m: Tensor,
    pub label_used: usize,
}

impl SemanticMaps {
    pub fn new(f: Tensor, f_prime: Tensor, inner_guided: &Tensor, label: usize) -> Result<Self> {
        let m_hat = couple(&f_prime, inner_guided)?;
        let m = select_class(&m_hat, label)?;
        Ok(SemanticMaps {
            f,
            f_prime,
            m_hat,
            m,
            label_used: label,
        })
    }
}

/// `N x D` tokens to a `D x h x w` map; token `k` lands on `(k / w, k % w)`.
pub fn tokens_to_featmap(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let [n, d] = tape.dims(tokens) else {
        return Err(Error::Invalid(format!(
            "tokens must be N x D, got {:?}",
            tape.dims(tokens)
        )));
    };
    let d = *d;
    if *n != h * w {
        return Err(Error::Invalid(format!(
            "{n} tokens do not fill a {h}x{w} grid"
        )));
    }
    let t = tape.transpose(tokens)?;
    Ok(tape.reshape(t, &[d, h, w])?)
}

/// 3x3 convolution (stride 1, padding 1) from `D` feature channels to `c` classes.
pub fn conv_head(tape: &mut Tape, params: &BoundParams, featmap: Var) -> Result<Var> {
    Ok(tape.conv3x3(
        featmap,
        params.get("head.weight")?,
        params.get("head.bias")?,
    )?)
}

/// Multiplies every channel of `f_prime` by the `h x w` map `s`.
pub fn couple(f_prime: &Tensor, s: &Tensor) -> Result<Tensor> {
    let [_, h, w] = f_prime.dims() else {
        return Err(Error::Invalid(format!(
            "activation maps must be c x h x w, got {:?}",
            f_prime.dims()
        )));
    };
    if s.dims() != [*h, *w] {
        return Err(Error::Invalid(format!(
            "attention map {:?} does not match activation maps {:?}",
            s.dims(),
            f_prime.dims()
        )));
    }
    Ok(ops::mul(f_prime, s)?)
}

pub fn select_class(m_hat: &Tensor, class: usize) -> Result<Tensor> {
    let [c, h, w] = m_hat.dims() else {
        return Err(Error::Invalid(format!(
            "maps must be c x h x w, got {:?}",
            m_hat.dims()
        )));
    };
    if class >= *c {
        return Err(Error::Invalid(format!(
            "class {class} out of range for {c} classes"
        )));
    }
    let (h, w) = (*h, *w);
    Ok(ops::narrow(m_hat, 0, class, 1)?.reshape(&[h, w])?)
}

/// Spatial mean of each channel of a `c x h x w` map.
pub fn gap_logits(tape: &mut Tape, maps: Var) -> Result<Var> {
    let c = match tape.dims(maps) {
        [c, _, _] => *c,
        d => return Err(Error::Invalid(format!("maps must be c x h x w, got {d:?}"))),
    };
    let m = tape.mean(maps, &[1, 2])?;
    Ok(tape.reshape(m, &[c])?)
}

/// Min-max normalization of a whole map to `[0, 1]`; constant maps become zeros.
pub fn normalize_map(m: &Tensor) -> Tensor {
    ops::minmax_normalize(m, m.numel()).expect("finite activation map")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_lands_on_its_cell() {
        let mut tape = Tape::new();
        // 6 tokens on a 2x3 grid, token k has value k in channel 1 only
        let tokens = Tensor::from_fn(&[6, 2], |i| if i % 2 == 1 { (i / 2) as f64 } else { 0.0 });
        let t = tape.constant(tokens);
        let f = tokens_to_featmap(&mut tape, t, 2, 3).unwrap();
        let v = tape.value(f);
        for k in 0..6 {
            assert_eq!(v.at(&[1, k / 3, k % 3]), k as f64);
            assert_eq!(v.at(&[0, k / 3, k % 3]), 0.0);
        }
        assert!(tokens_to_featmap(&mut tape, t, 2, 2).is_err());
    }

    #[test]
    fn single_token_map() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let f = tokens_to_featmap(&mut tape, t, 1, 1).unwrap();
        assert_eq!(tape.dims(f), &[3, 1, 1]);
        assert_eq!(tape.value(f).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn couple_and_select() {
        let fp = Tensor::from_fn(&[2, 2, 2], |i| i as f64 + 1.0);
        let ones = Tensor::ones(&[2, 2]);
        assert_eq!(couple(&fp, &ones).unwrap(), fp);
        assert!(couple(&fp, &Tensor::zeros(&[2, 2]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let spot = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap();
        let m = couple(&fp, &spot).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            assert_eq!(v != 0.0, i % 4 == 2);
        }
        assert_eq!(
            select_class(&couple(&fp, &ones).unwrap(), 1)
                .unwrap()
                .data(),
            &[5.0, 6.0, 7.0, 8.0]
        );
        assert!(select_class(&fp, 2).is_err());
        assert!(couple(&fp, &Tensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn gap_of_known_maps() {
        let mut tape = Tape::new();
        let m = tape.constant(
            Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap(),
        );
        let logits = gap_logits(&mut tape, m).unwrap();
        assert_eq!(tape.value(logits).data(), &[2.5, 7.0]);
    }

    #[test]
    fn normalize_constant_is_zero() {
        assert!(normalize_map(&Tensor::full(&[2, 2], 3.0))
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            normalize_map(&Tensor::from_vec(vec![1.0, 3.0, 2.0])).data(),
            &[0.0, 1.0, 0.5]
        );
    }
}
