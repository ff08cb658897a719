//! Portal: local authentication, second factors and the login state machine.

pub mod login;
pub mod mail;
pub mod totp;
pub mod users;

pub use login::{
    encode_target, expired_cookie, session_cookie, totp_params, validate_target, AuthMethod,
    AuthResult, LoginComplete, LoginError, LoginStep, NotificationOutcome, Portal, PortalDeps,
    SecondFactor,
};
