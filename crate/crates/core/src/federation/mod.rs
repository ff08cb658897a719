//! The portal as an identity provider: CAS server and OpenID Connect
//! provider (authorization code flow).

pub mod cas;
pub mod oidc;
