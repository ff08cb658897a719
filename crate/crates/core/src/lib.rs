//! Core of the llng single sign-on gateway: sessions, the access-rule
//! language, sealed tokens, the portal login state machine with second
//! factors, CAS and OpenID Connect provider logic, the DevOps rules document,
//! plugins and accounting.

pub mod clock;
pub mod rules;
pub mod session;
pub mod token;
pub mod accounting;
pub mod config;
pub mod portal;
pub mod access;
pub mod devops;
pub mod plugins;
pub mod federation;
