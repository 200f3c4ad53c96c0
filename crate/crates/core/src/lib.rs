pub mod adversary;
pub mod anonymizer;
pub mod audit;
pub mod auth_server;
pub mod clock;
pub mod crypto;
pub mod net;
pub mod protocol;
pub mod records;
pub mod sim;
pub mod tally;
pub mod vote_server;
pub mod voter;
