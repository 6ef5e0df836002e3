//! Per-resolution flows and validity masks for the TSAM layers of a network.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{cycle_validity, rescale_flow, FlowField, ValidityConfig, ValidityMask};
use crate::tsam::FrameAlignment;

/// Frame alignments keyed by feature resolution. Build once per clip.
#[derive(Debug, Clone)]
pub struct FlowPyramid {
    levels: Vec<((usize, usize), Arc<FrameAlignment>)>,
}

impl FlowPyramid {
    /// `flows_fwd[t] = F_{t->t+1}` and `flows_bwd[t] = F_{t+1->t}` at full
    /// resolution `full`, for `t` in `0..frames-1`. The cycle threshold is
    /// scaled with each level's downsampling factor.
    pub fn build(
        flows_fwd: &[FlowField],
        flows_bwd: &[FlowField],
        frames: usize,
        full: (usize, usize),
        resolutions: &[(usize, usize)],
        validity: &ValidityConfig,
    ) -> Result<Self> {
        validity.validate()?;
        let pairs = frames.saturating_sub(1);
        if frames == 0 || flows_fwd.len() != pairs || flows_bwd.len() != pairs {
            return Err(Error::invalid(format!(
                "missing flow pair: {frames} frames need {pairs} pairs per direction, got {} forward and {} backward",
                flows_fwd.len(),
                flows_bwd.len()
            )));
        }
        if let Some(f) = flows_fwd.iter().chain(flows_bwd).find(|f| (f.height(), f.width()) != full) {
            return Err(Error::shape(
                "flow_pyramid",
                format!("flow is {}x{}, expected {}x{}", f.height(), f.width(), full.0, full.1),
            ));
        }
        let mut distinct: Vec<(usize, usize)> = resolutions.to_vec();
        distinct.sort_unstable_by(|a, b| b.cmp(a));
        distinct.dedup();

        let mut levels = Vec::with_capacity(distinct.len());
        for &(h, w) in &distinct {
            let resize = |f: &FlowField| if (h, w) == full { Ok(f.clone()) } else { rescale_flow(f, h, w) };
            let fwd: Vec<FlowField> = flows_fwd.iter().map(resize).collect::<Result<_>>()?;
            let bwd: Vec<FlowField> = flows_bwd.iter().map(resize).collect::<Result<_>>()?;
            let factor = ((h as f64 / full.0 as f64) * (w as f64 / full.1 as f64)).sqrt();
            let cfg = validity.scaled(factor);

            let mut to_prev = vec![FlowField::zeros(h, w)];
            let mut valid_prev = vec![ValidityMask::zeros(h, w)];
            let mut to_next = Vec::with_capacity(frames);
            let mut valid_next = Vec::with_capacity(frames);
            for t in 0..pairs {
                to_prev.push(bwd[t].clone());
                valid_prev.push(cycle_validity(&fwd[t], &bwd[t], &cfg)?);
                to_next.push(fwd[t].clone());
                valid_next.push(cycle_validity(&bwd[t], &fwd[t], &cfg)?);
            }
            to_next.push(FlowField::zeros(h, w));
            valid_next.push(ValidityMask::zeros(h, w));
            let alignment = FrameAlignment::new(&to_prev, &to_next, &valid_prev, &valid_next)?;
            levels.push(((h, w), Arc::new(alignment)));
        }
        Ok(FlowPyramid { levels })
    }

    pub fn level(&self, h: usize, w: usize) -> Result<&Arc<FrameAlignment>> {
        self.levels
            .iter()
            .find(|(r, _)| *r == (h, w))
            .map(|(_, a)| a)
            .ok_or_else(|| Error::invalid(format!("flow pyramid has no {h}x{w} level")))
    }

    /// Level resolutions, largest first.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|(r, _)| *r).collect()
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flows_give_all_valid_interior_frames() {
        let zeros = vec![FlowField::zeros(16, 16); 3];
        let p = FlowPyramid::build(&zeros, &zeros, 4, (16, 16), &[(16, 16), (8, 8), (8, 8), (4, 4)], &ValidityConfig::default())
            .unwrap();
        assert_eq!(p.resolutions(), vec![(16, 16), (8, 8), (4, 4)]);
        for (h, w) in p.resolutions() {
            let a = p.level(h, w).unwrap();
            for t in 1..4 {
                assert!(a.valid_prev(t).iter().all(|&v| v == 1.0));
            }
            for t in 0..3 {
                assert!(a.valid_next(t).iter().all(|&v| v == 1.0));
            }
        }
        assert!(p.level(2, 2).is_err());
    }

    #[test]
    fn missing_pair_is_an_error() {
        let zeros = vec![FlowField::zeros(8, 8); 2];
        assert!(FlowPyramid::build(&zeros, &zeros[..1], 3, (8, 8), &[(8, 8)], &ValidityConfig::default()).is_err());
    }
}
