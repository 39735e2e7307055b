fn main() {
    // Filled in by the CLI module; placeholder so the workspace builds while
    // the library crates come up.
    eprintln!("ffsm: not yet wired");
    std::process::exit(2);
}
