#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod oracle;
