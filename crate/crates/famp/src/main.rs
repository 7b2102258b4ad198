fn main() {
    // Piping stdout into `head` etc. must not panic the process.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(famp::cli::run());
}
