//! Caption masking strategies.
