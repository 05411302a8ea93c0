pub mod certificate;
pub mod error;
pub mod evolution;
pub mod fft;
pub mod field;
pub mod forcing;
pub mod harness;
pub mod nonlinear;
pub mod ou;
pub mod seeds;
pub mod snapshot;
pub mod stokes;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/spectral_fields.md")]
    pub mod spectral_fields {}
    #[doc = include_str!("../../../book/src/stokes.md")]
    pub mod stokes {}
    #[doc = include_str!("../../../book/src/nonlinear.md")]
    pub mod nonlinear {}
    #[doc = include_str!("../../../book/src/certificate.md")]
    pub mod certificate {}
    #[doc = include_str!("../../../book/src/evolution.md")]
    pub mod evolution {}
    #[doc = include_str!("../../../book/src/ornstein_uhlenbeck.md")]
    pub mod ornstein_uhlenbeck {}
    #[doc = include_str!("../../../book/src/harness.md")]
    pub mod harness {}
}
