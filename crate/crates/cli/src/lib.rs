//! Library surface of the experiment command line.
