//! Holds the `acceptance` test target only. It lives in its own package so
//! that it runs after every other suite in the workspace.
