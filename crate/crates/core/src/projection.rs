//! Transverse Mercator on the WGS84 ellipsoid.
//!
//! Forward and inverse mappings use the Krüger n-series to fourth order,
//! which is accurate to well under a millimetre within a few degrees of the
//! central meridian. The scale factor on the central meridian is 1, so grid
//! distances near the projection centre are true metres.

use std::fmt;

use serde::{Deserialize, Serialize};

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// A metric map projection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    /// Transverse Mercator with unit central scale, origin at (`lon_0`, `lat_0`).
    TransverseMercator { lon_0: f64, lat_0: f64 },
}

impl Projection {
    pub fn transverse_mercator(lon_0: f64, lat_0: f64) -> Self {
        Projection::TransverseMercator { lon_0, lat_0 }
    }

    /// Parses the PROJ-style string produced by `Display`.
    pub fn from_proj_string(s: &str) -> Option<Self> {
        let mut proj = None;
        let (mut lon_0, mut lat_0) = (None, None);
        for tok in s.split_whitespace() {
            let (k, v) = tok.trim_start_matches('+').split_once('=').unwrap_or((tok, ""));
            match k {
                "proj" => proj = Some(v),
                "lon_0" => lon_0 = v.parse::<f64>().ok(),
                "lat_0" => lat_0 = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        match proj? {
            "tmerc" => Some(Projection::TransverseMercator {
                lon_0: lon_0.unwrap_or(0.0),
                lat_0: lat_0.unwrap_or(0.0),
            }),
            _ => None,
        }
    }

    /// Projects (lon, lat) in degrees to (x, y) metres.
    pub fn forward(&self, lon: f64, lat: f64) -> (f64, f64) {
        match *self {
            Projection::TransverseMercator { lon_0, lat_0 } => {
                let tm = Kruger::wgs84();
                let (_, n0) = tm.forward(lat_0.to_radians(), 0.0);
                let (e, n) = tm.forward(lat.to_radians(), (lon - lon_0).to_radians());
                (e, n - n0)
            }
        }
    }

    /// Inverse of [`Projection::forward`], returning (lon, lat) in degrees.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Projection::TransverseMercator { lon_0, lat_0 } => {
                let tm = Kruger::wgs84();
                let (_, n0) = tm.forward(lat_0.to_radians(), 0.0);
                let (lat, dlon) = tm.inverse(x, y + n0);
                (lon_0 + dlon.to_degrees(), lat.to_degrees())
            }
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Projection::TransverseMercator { lon_0, lat_0 } => {
                write!(
                    f,
                    "+proj=tmerc +lat_0={lat_0} +lon_0={lon_0} +k=1 +x_0=0 +y_0=0 +ellps=WGS84 +units=m"
                )
            }
        }
    }
}

struct Kruger {
    e: f64,
    big_a: f64,
    alpha: [f64; 4],
    beta: [f64; 4],
}

impl Kruger {
    fn wgs84() -> Self {
        let f = WGS84_F;
        let n = f / (2.0 - f);
        let (n2, n3, n4) = (n * n, n * n * n, n * n * n * n);
        let e = (f * (2.0 - f)).sqrt();
        let big_a = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0,
            49561.0 * n4 / 161_280.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0,
            4397.0 * n4 / 161_280.0,
        ];
        Kruger {
            e,
            big_a,
            alpha,
            beta,
        }
    }

    /// (lat, dlon) radians -> (easting, northing) metres, unit scale.
    fn forward(&self, lat: f64, dlon: f64) -> (f64, f64) {
        let e = self.e;
        let t = (lat.sin().atanh() - e * (e * lat.sin()).atanh()).sinh();
        let xi_p = t.atan2(dlon.cos());
        let eta_p = (dlon.sin() / (1.0 + t * t).sqrt()).atanh();
        let mut xi = xi_p;
        let mut eta = eta_p;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
            eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
        }
        (self.big_a * eta, self.big_a * xi)
    }

    /// (easting, northing) -> (lat, dlon) radians.
    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let xi = y / self.big_a;
        let eta = x / self.big_a;
        let mut xi_p = xi;
        let mut eta_p = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi_p -= b * (k * xi).sin() * (k * eta).cosh();
            eta_p -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let dlon = eta_p.sinh().atan2(xi_p.cos());
        let tau_p = xi_p.sin() / (eta_p.sinh().powi(2) + xi_p.cos().powi(2)).sqrt();
        let lat = self.tau_from_conformal(tau_p).atan();
        (lat, dlon)
    }

    /// Newton solve for tan(lat) given tan(conformal lat).
    fn tau_from_conformal(&self, tau_p: f64) -> f64 {
        let e = self.e;
        let e2m = 1.0 - e * e;
        let mut tau = tau_p / e2m;
        for _ in 0..8 {
            let tau1 = (1.0 + tau * tau).sqrt();
            let sig = (e * (e * tau / tau1).atanh()).sinh();
            let taupa = (1.0 + sig * sig).sqrt() * tau - sig * tau1;
            let dtau = (tau_p - taupa) / (1.0 + taupa * taupa).sqrt() * (1.0 + e2m * tau * tau)
                / (e2m * tau1);
            tau += dtau;
            if dtau.abs() < 1e-15 * tau.abs().max(1.0) {
                break;
            }
        }
        tau
    }
}
