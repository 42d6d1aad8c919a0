use super::{Domain, MeterError, PowerSample};

/// Trapezoidal integral of one domain's power samples, in joules.
/// A single sample integrates to zero.
pub fn integrate(samples: &[PowerSample]) -> Result<f64, MeterError> {
    if samples.is_empty() {
        return Err(MeterError::Usage("integration needs at least one sample".into()));
    }
    let mut joules = 0.0;
    for w in samples.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.timestamp < a.timestamp {
            return Err(MeterError::Ordering {
                prev: a.timestamp,
                next: b.timestamp,
            });
        }
        joules += 0.5 * (a.watts + b.watts) * (b.timestamp - a.timestamp);
    }
    Ok(joules)
}

/// Integrates a mixed-domain sample stream domain by domain. Samples must
/// be non-decreasing in time within each domain.
pub fn integrate_by_domain(samples: &[PowerSample]) -> Result<[f64; 3], MeterError> {
    let mut out = [0.0; 3];
    for d in Domain::ALL {
        let per: Vec<PowerSample> = samples.iter().filter(|s| s.domain == d).copied().collect();
        if !per.is_empty() {
            out[d.index()] = integrate(&per)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(t: f64, w: f64) -> PowerSample {
        PowerSample {
            timestamp: t,
            watts: w,
            domain: Domain::Cpu,
        }
    }

    #[test]
    fn examples() {
        assert_eq!(integrate(&[s(0.0, 10.0), s(1.0, 30.0)]).unwrap(), 20.0);
        assert_eq!(
            integrate(&[s(0.0, 5.0), s(1.0, 5.0), s(2.0, 5.0)]).unwrap(),
            10.0
        );
        assert_eq!(integrate(&[s(3.0, 99.0)]).unwrap(), 0.0);
    }

    #[test]
    fn linear_ramp_matches_closed_form() {
        // P(t) = 10 t over [0, 10] s: integral = 5 t^2 = 500 J
        let samples: Vec<_> = (0..=100)
            .map(|i| {
                let t = i as f64 * 0.1;
                s(t, 10.0 * t)
            })
            .collect();
        let j = integrate(&samples).unwrap();
        assert!((j - 500.0).abs() / 500.0 < 1e-9, "{j}");
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        assert!(matches!(
            integrate(&[s(1.0, 1.0), s(0.5, 1.0)]),
            Err(MeterError::Ordering { .. })
        ));
    }

    #[test]
    fn domains_are_separated() {
        let mut samples = vec![s(0.0, 1.0), s(2.0, 1.0)];
        samples.push(PowerSample {
            timestamp: 0.0,
            watts: 3.0,
            domain: Domain::Gpu,
        });
        samples.push(PowerSample {
            timestamp: 1.0,
            watts: 3.0,
            domain: Domain::Gpu,
        });
        assert_eq!(integrate_by_domain(&samples).unwrap(), [2.0, 0.0, 3.0]);
    }
}
