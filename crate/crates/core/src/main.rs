fn main() {
    streetlabel::cli::run()
}
