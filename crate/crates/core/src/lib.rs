pub mod document;
pub mod eval;
pub mod markup;
pub mod message;
pub mod protocol;
pub mod syntax;
pub mod toy;
pub mod session;
