use crate::error::{Error, Result};
use crate::rng::{Seed, StreamId};
use crate::tensor::Tensor;

/// Half-width of the uniform prompt initialization.
pub const PROMPT_INIT_BOUND: f64 = 0.03;

/// Soft prompt tokens prepended to the input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    /// `[L_P, D]`
    pub tokens: Tensor,
}

impl PromptParams {
    pub fn length(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.tokens.numel()
    }
}

/// Trainable prompt with entries drawn uniformly from `[-0.03, 0.03]`.
pub fn init_prompt(length: usize, dim: usize, seed: Seed, stream: StreamId) -> Result<PromptParams> {
    if length == 0 {
        return Err(Error::Config("prompt length must be at least 1".into()));
    }
    let mut rng = seed.stream(stream);
    Ok(PromptParams {
        tokens: Tensor::uniform(&[length, dim], PROMPT_INIT_BOUND, &mut rng).with_requires_grad(true),
    })
}

/// `[P; x]` for a single `[L_S, D]` sequence.
pub fn prepend_prompt(prompt: &PromptParams, x: &Tensor) -> Result<Tensor> {
    prepend_prompt_list(&[prompt], x)
}

/// Stacks several prompts in the given order ahead of `x`. An empty list returns `x` unchanged.
pub fn prepend_prompt_list(prompts: &[&PromptParams], x: &Tensor) -> Result<Tensor> {
    let d = match x.shape() {
        [_, d] => *d,
        s => return Err(Error::dim("prepend_prompt", format!("sequence shape {s:?}"))),
    };
    let mut data = Vec::new();
    let mut rows = x.shape()[0];
    for p in prompts {
        if p.tokens.shape()[1] != d {
            return Err(Error::dim(
                "prepend_prompt",
                format!("prompt width {} vs sequence width {d}", p.tokens.shape()[1]),
            ));
        }
        data.extend_from_slice(p.tokens.data());
        rows += p.length();
    }
    data.extend_from_slice(x.data());
    Tensor::new(vec![rows, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> StreamId {
        StreamId::named("prompt-test")
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_prompt(10, 16, Seed(1), stream()).unwrap();
        let b = init_prompt(10, 16, Seed(1), stream()).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.data().iter().all(|v| v.abs() <= PROMPT_INIT_BOUND));
        assert!(a.tokens.requires_grad());
        assert!(init_prompt(0, 16, Seed(1), stream()).is_err());
    }

    #[test]
    fn init_mean_is_centered() {
        let p = init_prompt(100, 100, Seed(7), stream()).unwrap();
        let n = p.param_count() as f64;
        let mean = p.tokens.data().iter().sum::<f64>() / n;
        // uniform on [-a, a] has variance a^2 / 3
        let sigma = (PROMPT_INIT_BOUND * PROMPT_INIT_BOUND / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn prepend_lengths_and_suffix() {
        let p = init_prompt(10, 4, Seed(2), stream()).unwrap();
        let x = Tensor::uniform(&[197, 4], 1.0, &mut Seed(3).named("x"));
        let y = prepend_prompt(&p, &x).unwrap();
        assert_eq!(y.shape(), &[207, 4]);
        assert_eq!(&y.data()[..40], p.tokens.data());
        assert_eq!(&y.data()[40..], x.data());
        assert_eq!(prepend_prompt_list(&[], &x).unwrap(), x);
        let wide = init_prompt(1, 5, Seed(2), stream()).unwrap();
        assert!(prepend_prompt(&wide, &x).is_err());
    }
}
