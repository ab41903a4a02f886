//! Inflation-at-risk toolkit.
//!
//! Estimates the conditional distribution of domestic inflation for each
//! country in a multi-country panel: factors are extracted from a
//! multi-level dynamic factor model with overlapping regional and income
//! blocks, fed into factor-augmented quantile regressions, converted to
//! skew-t densities with inflation-at-risk / deflation-at-risk measures,
//! and evaluated out of sample with quantile scores, CRPS variants and
//! Diebold-Mariano / fluctuation tests.

pub mod cli;
pub mod dates;
pub mod density;
pub mod evaluate;
pub mod faqr;
pub mod ingest;
pub mod mldfm;
pub mod optim;
pub mod preprocess;
